import dataclasses
from pathlib import Path

import numpy as np
import pytest

from tr2 import autograd as ag
from tr2 import checkpoint
from tr2.autograd import Tape, Tensor
from tr2.cli import main
from tr2.config import ConfigError, RunConfig, format_config, load_config, parse_config
from tr2.experiments import protocol
from tr2.fusion import FusionConfig
from tr2.losses import OptimConfig
from tr2.model import Ablation, build_cache, forward, init_params, objective, stack
from tr2.synth import GenConfig, generate
from tr2.train import (
    TABLE4_ROWS,
    RunRecord,
    ablate,
    check_consistency,
    format_ablation_table,
    gradcheck,
    make_provider,
    make_spec,
    toy_config,
    train,
)


def small_config(**over) -> RunConfig:
    gen = GenConfig(seed=1, num_videos=6, frames_per_video=4, pairs_per_frame=2, entity_class_count=6,
                    predicate_partition=(2, 3, 3), d_v=4, d_clip=8)
    fusion = FusionConfig(d_model=8, heads=2, ff_dim=16, temporal_layers=1, max_temporal_positions=8, d_semantic=4)
    cfg = RunConfig(gen=gen, fusion=fusion, text_dim=8, epochs=2, batch_size=2)
    return dataclasses.replace(cfg, **over)


@pytest.fixture(scope="module")
def data():
    return generate(small_config().gen)


# ---------------------------------------------------------------- config


def test_config_text_roundtrip_and_hash():
    cfg = small_config(ablation=Ablation(guidance="binary", spatial=False))
    again = parse_config(format_config(cfg))
    assert again == cfg and again.hash() == cfg.hash()
    assert parse_config("seed = 1").hash() != parse_config("seed = 2").hash()


@pytest.mark.parametrize("text", ["fusion.d_modle = 8", "nosuch = 1", "bogus.x = 1", "epochs = many", "task = vqa"])
def test_config_rejects_bad_input(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_positions_must_cover_video_length():
    cfg = small_config(fusion=FusionConfig(d_model=8, heads=2, max_temporal_positions=3))
    with pytest.raises(ConfigError, match="max_temporal_positions"):
        check_consistency(cfg)


# ---------------------------------------------------------------- training contracts


def test_same_seed_same_run(data):
    videos, emb = data
    p1, r1 = train(small_config(), videos, emb)
    p2, r2 = train(small_config(), videos, emb)
    assert checkpoint.dumps(p1) == checkpoint.dumps(p2)
    r1.wall_time = r2.wall_time = 0.0
    assert r1.to_json() == r2.to_json()
    p3, _ = train(small_config(seed=5), videos, emb)
    assert checkpoint.dumps(p3) != checkpoint.dumps(p1)


def test_zero_learning_rate_keeps_parameters(data):
    videos, emb = data
    cfg = small_config(optim=OptimConfig(lr=0.0), epochs=1)
    params, _ = train(cfg, videos, emb)
    spec = make_spec(cfg, cfg.gen.d_v, cfg.gen.d_clip, cfg.text_dim)
    init = init_params(spec, cfg.seed)
    assert params.keys() == init.keys()
    for k in init:
        np.testing.assert_array_equal(params[k], init[k])


def test_zero_lambda_leaves_entity_head_without_gradient(data):
    videos, emb = data
    cfg = small_config(task="sgdet", optim=OptimConfig(entity_weight=0.0))
    spec = make_spec(cfg, cfg.gen.d_v, cfg.gen.d_clip, cfg.text_dim)
    params = {k: Tensor(v, requires_grad=True) for k, v in init_params(spec, 0).items()}
    batch = stack([build_cache(v, emb, spec, params, True, make_provider(cfg)) for v in videos[:2]])
    with Tape() as tape:
        loss, br = objective(spec, params, batch, cfg.optim)
    grads = tape.backward(loss, list(params.values()))
    assert br.obj > 0
    assert not grads[params["entity.w"]].any() and not grads[params["entity.b"]].any()
    assert grads[params["rel.w"]].any()


def test_select_best_returns_a_validated_epoch(data):
    videos, emb = data
    cfg = small_config(select_best=True, epochs=3)
    params, rec = train(cfg, videos[:4], emb, videos[4:], eval_every=1)
    scores = [e.val_recall["R@10"] for e in rec.epochs]
    assert rec.selected_epoch == int(np.argmax(scores))
    _, last = train(dataclasses.replace(cfg, select_best=False), videos[:4], emb, videos[4:], eval_every=1)
    assert last.selected_epoch == 2


def test_relation_loss_halves_on_clean_data():
    cfg = RunConfig(gen=GenConfig(seed=0, num_videos=30, subtlety=0.1), epochs=30,
                    ablation=Ablation(guidance="none"))
    videos, emb = generate(cfg.gen)
    _, rec = train(cfg, videos, emb)
    first, last = rec.epochs[0].loss["rel"], rec.epochs[-1].loss["rel"]
    assert last <= 0.5 * first


def test_later_frames_do_not_change_earlier_outputs(data):
    videos, emb = data
    cfg = small_config()
    spec = make_spec(cfg, cfg.gen.d_v, cfg.gen.d_clip, cfg.text_dim)
    params = {k: Tensor(v) for k, v in init_params(spec, 0).items()}
    video = videos[0]
    base = forward(spec, params, stack([build_cache(video, emb, spec, params, False)]))
    last = video.frames[-1].frame_index
    bumped = {k: (v + 3.0 if k[0] == video.video_id and k[1] == last else v) for k, v in emb.items()}
    moved = forward(spec, params, stack([build_cache(video, bumped, spec, params, False)]))
    keys = stack([build_cache(video, emb, spec, params, False)]).inputs.layout.keys
    early = [n for n, k in enumerate(keys) if k[1] < video.T - 1]
    late = [n for n, k in enumerate(keys) if k[1] == video.T - 1]
    np.testing.assert_array_equal(base.logits.data[early], moved.logits.data[early])
    assert not np.allclose(base.logits.data[late], moved.logits.data[late])


# ---------------------------------------------------------------- ablations and gradcheck


def test_ablation_table_base_row_has_zero_delta(data):
    videos, emb = data
    cfg = small_config(epochs=1)
    rows = ablate(cfg, TABLE4_ROWS[:2], [0], videos[:4], videos[4:], emb)
    table = format_ablation_table(rows, cfg.eval.Ks).splitlines()
    assert table[0].startswith("variant,guidance,spatial,temporal_decoder,message_token,R@10")
    assert table[1].split(",")[:5] == ["base", "eq2", "false", "false", "false"]
    assert all(float(c) == 0.0 for c in table[1].split(",")[-3:])


def test_gradcheck_passes_on_toy_config():
    res = gradcheck(toy_config(), guidance_modes=("eq2",))
    assert res.passed, res.worst


def test_gradcheck_catches_a_wrong_backward(monkeypatch):
    def bad_relu(a):
        mask = a.data > 0
        return ag._result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask * 1.1,))
    monkeypatch.setattr(ag, "relu", bad_relu)
    assert not gradcheck(toy_config(), guidance_modes=("binary",)).passed


# ---------------------------------------------------------------- command line


def test_cli_end_to_end(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(format_config(small_config(epochs=1)))
    data, run = tmp_path / "data", tmp_path / "run"
    assert main(["gen", "--config", str(cfg), "--out", str(data)]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(run), "--label", "x"]) == 0
    assert (run / "checkpoint.bin").exists()
    rec = RunRecord.from_json((run / "run_record.json").read_text())
    assert rec.label == "x" and len(rec.epochs) == 1
    assert main(["eval", "--config", str(cfg), "--data", str(data), "--checkpoint", str(run / "checkpoint.bin"),
                 "--split", "all", "--out", str(tmp_path / "r.csv"), "--strata", str(tmp_path / "s.csv"),
                 "--baseline", str(run / "checkpoint.bin")]) == 0
    assert (tmp_path / "r.csv").read_text().startswith("task,")
    assert main(["report", str(run / "run_record.json"), "--out", str(tmp_path / "rep.csv")]) == 0
    assert (tmp_path / "rep.csv").read_text().splitlines()[0] == "run,label,seed,config_hash,epoch,obj,rel,guidance,total"
    capsys.readouterr()


def test_cli_errors_exit_nonzero(tmp_path, capsys):
    assert main(["gen", "--set", "fusion.nope=1", "--out", str(tmp_path)]) == 1
    assert "error: ConfigError" in capsys.readouterr().err
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 1


def test_protocol_file_matches_experiment_protocol():
    cfg = protocol()
    assert load_config(Path(__file__).parents[1] / "configs" / "protocol.cfg") == cfg
    assert round(cfg.gen.num_videos * cfg.split[0]) == 200
