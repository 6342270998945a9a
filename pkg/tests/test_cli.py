import csv
import dataclasses
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from helpers import randomize
from navil import cli
from navil.config import ConfigError, from_dict, load, preset
from navil.decoder import attention_stats
from navil.model import prepare
from navil.packing import PackedSequence
from navil.params import ParameterStore, init_params, load_checkpoint, save_checkpoint, tie_experts
from navil.scaling import optimal_encoder_size, records_from_csv
from navil.training import gen_synthetic, parse_metrics_csv
import oracles

TINY = """
preset = "desk-tiny"
seed = 3
eval_every = 5

[encoder]
depth = 1
width = 16
mlp_width = 43
heads = 1
out_width = 32

[decoder]
depth = 2
width = 32
mlp_width = 64
heads = 2
vocab = 12

[data]
n_train = 16
n_val = 4
image_size = 32
batch_size = 4

[[stages]]
stage = "S1.1"
steps = 3
warmup_steps = 1

[[stages]]
stage = "S2"
steps = 6
schedule = "cosine"
warmup_steps = 1
"""


@pytest.fixture
def tiny_toml(tmp_path):
    p = tmp_path / "tiny.toml"
    p.write_text(TINY)
    return p


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_train_writes_artifacts_and_is_deterministic(tiny_toml, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("train", "--config", tiny_toml, "--out", a) == 0
    assert run("train", "--config", tiny_toml, "--out", b) == 0
    for name in ("metrics.csv", "config.json", "checkpoint/manifest.json", "checkpoint/params.bin"):
        assert (a / name).exists(), name
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    rows = parse_metrics_csv((a / "metrics.csv").read_text())
    assert len(rows) == 9 and rows[0]["stage"] == "S1.1"
    echo = json.loads((a / "config.json").read_text())
    assert echo["seed"] == 3 and echo["model"]["decoder"]["width"] == 32


def test_seed_flag_changes_run(tiny_toml, tmp_path):
    run("train", "--config", tiny_toml, "--out", tmp_path / "a")
    run("train", "--config", tiny_toml, "--out", tmp_path / "b", "--seed", 4)
    assert (tmp_path / "a/metrics.csv").read_text() != (tmp_path / "b/metrics.csv").read_text()


def test_out_dir_env_override(tiny_toml, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env"))
    assert run("pack-debug", "--config", tiny_toml) == 0
    assert (tmp_path / "env" / "packed.json").exists()
    assert run("pack-debug", "--config", tiny_toml, "--out", tmp_path / "flag") == 0
    assert (tmp_path / "flag" / "packed.json").exists()


def test_missing_field_names_field(tmp_path, capsys):
    raw = TINY.replace('preset = "desk-tiny"\n', "")
    p = tmp_path / "bad.toml"
    p.write_text(raw)
    assert run("train", "--config", p) == 1
    err = capsys.readouterr().err
    assert "encoder.patch_stride" in err and "missing" in err
    with pytest.raises(ConfigError) as exc:
        from_dict({"seed": 1, "encoder": {}, "decoder": {}, "packing": {}, "data": {}, "stages": []})
    assert exc.value.field == "encoder.depth"


def test_invalid_config_values(tmp_path, capsys):
    p = tmp_path / "bad.toml"
    p.write_text(TINY.replace("heads = 1", "heads = 3"))
    assert run("train", "--config", p) == 1
    assert "encoder.heads" in capsys.readouterr().err
    p.write_text(TINY + "\nbogus = 1\n")
    assert run("train", "--config", p) == 1
    p.write_text("not = [valid")
    assert run("train", "--config", p) == 1
    assert run("train", "--config", tmp_path / "missing.toml") == 1


def test_reference_preset_not_trainable(tmp_path, capsys):
    assert run("train", "--preset", "navil-2b-paper", "--out", tmp_path) == 1
    assert "preset" in capsys.readouterr().err
    cfg = preset("navil-2b-paper")
    assert (cfg.model.encoder.depth, cfg.model.encoder.width) == (24, 1472)
    assert [s.steps for s in cfg.stages] == [70_000, 40_000, 30_000]


def test_runtime_error_exit_code(tiny_toml, tmp_path, capsys):
    p = tmp_path / "warm.toml"
    p.write_text(TINY.replace("eval_every = 5", 'eval_every = 5\ninit_checkpoint = "/nonexistent"'))
    assert run("train", "--config", p, "--out", tmp_path / "x") == 2


def test_load_matches_cli_resolution(tiny_toml):
    cfg = load(str(tiny_toml))
    assert cfg.model.encoder.width == 16 and cfg.packing.tau == pytest.approx(2 ** 0.5 / 2)
    assert cfg.stages[1].schedule == "cosine" and cfg.stages[1].beta2 == 0.95


def test_pack_debug_outputs(capsys, tmp_path):
    assert run("pack-debug", "--image", "64x64", "--threshold", 4096) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["length"] == 9 and doc["scales"] == [[2, 2]]
    assert run("pack-debug", "--image", "256x256", "--threshold", 4096, "--caption", "1,2") == 0
    doc = json.loads(capsys.readouterr().out)
    assert len(doc["scales"]) == 4 and doc["slots"][-1]["loss"] == 1
    assert run("pack-debug", "--image", "0x5") == 1
    assert run("pack-debug", "--image", "abc") == 1
    assert run("pack-debug", "--tau", 1.5) == 1


def test_pack_debug_stable_and_parseable(capsys):
    outs = []
    for _ in range(2):
        run("pack-debug", "--image", "181x96", "--threshold", 4096)
        outs.append(capsys.readouterr().out)
    assert outs[0] == outs[1]
    PackedSequence.from_json(outs[0]).validate()


def test_checkpoint_save_load_save_identical(tmp_path):
    cfg = preset("desk-tiny").model
    store = randomize(init_params(cfg, 0), 1)
    save_checkpoint(store, cfg, tmp_path / "a")
    loaded, cfg2 = load_checkpoint(tmp_path / "a")
    assert cfg2 == cfg
    for name in store:
        assert np.array_equal(loaded[name].data, store[name].data.astype(np.float32).astype(np.float64))
        assert loaded.group_of(name) == store.group_of(name)
    save_checkpoint(loaded, cfg2, tmp_path / "b")
    for f in ("manifest.json", "params.bin"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_checkpoint_manifest_tiles_payload(tmp_path):
    cfg = preset("desk-tiny").model
    save_checkpoint(init_params(cfg, 0), cfg, tmp_path)
    m = json.loads((tmp_path / "manifest.json").read_text())
    ends = [e["offset"] + e["nbytes"] for e in m["tensors"]]
    assert [e["offset"] for e in m["tensors"]] == [0] + ends[:-1]
    assert ends[-1] == m["total_bytes"] == os.path.getsize(tmp_path / "params.bin")
    with open(tmp_path / "params.bin", "ab") as fh:
        fh.write(b"\0\0\0\0")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path)


def _attn_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_attn_dump_tied_vs_vanilla(tmp_path):
    cfg = preset("desk-tiny")
    store = randomize(init_params(cfg.model, 0), 2)
    tie_experts(store)
    save_checkpoint(store, cfg.model, tmp_path / "tied")
    vanilla = ParameterStore()
    for name in store:
        if ".visual." not in name:
            vanilla.add(name, store[name].data, store.group_of(name))
    save_checkpoint(vanilla, cfg.model, tmp_path / "vanilla")
    assert run("attn-dump", "--checkpoint", tmp_path / "tied", "--out", tmp_path / "d1") == 0
    assert run("attn-dump", "--checkpoint", tmp_path / "vanilla", "--out", tmp_path / "d2") == 0
    t1 = (tmp_path / "d1" / "attention.csv").read_text()
    assert t1 == (tmp_path / "d2" / "attention.csv").read_text()
    rows = _attn_rows(tmp_path / "d1" / "attention.csv")
    assert len(rows) == cfg.model.decoder.depth
    for r in rows:
        assert abs(float(r["visual_to_visual"]) + float(r["visual_to_text"]) - 1) < 1e-6
        assert abs(float(r["text_to_visual"]) + float(r["text_to_text"]) - 1) < 1e-6

    # the same statistics from the independent vanilla oracle, on the float32-rounded weights
    loaded, _ = load_checkpoint(tmp_path / "vanilla")
    P = {n: loaded[n].data for n in loaded}
    sample = gen_synthetic((cfg.seed, cfg.data.seed), 1, cfg.data, stream="attn")
    batch = prepare(sample, cfg.model, cfg.packing)
    seq = batch.seqs[0]
    vis_rows = []
    for img in batch.groups:  # one sample: each group holds a single scale image
        vis_rows.extend(oracles.encode_image(img[0], P, cfg.model.encoder))
    slots = np.flatnonzero(seq.modality == 1)
    probs = []
    oracles.vanilla_logits(np.maximum(seq.token_ids, 0), list(zip(slots, vis_rows)), P, cfg.model.decoder, probs)
    stats = attention_stats(probs, seq.modality[None])
    assert t1 == cli.attention_csv(stats)


def test_attn_dump_shape_mismatch(tmp_path, capsys):
    cfg = preset("desk-tiny")
    other = dataclasses.replace(cfg.model.decoder, depth=2)
    model = dataclasses.replace(cfg.model, decoder=other)
    save_checkpoint(init_params(model, 0), model, tmp_path / "ck")
    assert run("attn-dump", "--checkpoint", tmp_path / "ck", "--out", tmp_path / "o") == 1
    assert "checkpoint" in capsys.readouterr().err
    assert run("attn-dump", "--out", tmp_path / "o") == 1


def test_sweep_command(tmp_path):
    p = tmp_path / "sweep.toml"
    p.write_text(TINY.replace("steps = 3", "steps = 0") + """
[sweep]
encoders = [[1, 16], [1, 32]]
decoders = [[1, 32], [1, 64]]
seeds = [0]
lam = 0.01
""")
    assert run("sweep", "--config", p, "--out", tmp_path / "s") == 0
    recs = records_from_csv((tmp_path / "s" / "records.csv").read_text())
    assert len(recs) == 4
    report = json.loads((tmp_path / "s" / "fit_report.json").read_text())
    for key in ("loss_vs_encoder", "loss_vs_llm"):
        assert report[key] and all({"slope", "intercept", "r2"} <= set(e) for e in report[key])
    for entry in report["optimal_encoder"]:
        ladder = {r.encoder_params: r.val_loss for r in recs if r.llm_params == entry["llm_params"]}
        assert entry["encoder_params"] == optimal_encoder_size(ladder, 0.01).size


def test_sweep_config_errors(tmp_path):
    p = tmp_path / "s.toml"
    p.write_text(TINY + "\n[sweep]\nencoders = [[1, 16]]\n")
    assert run("sweep", "--config", p) == 1
    p.write_text(TINY + "\n[sweep]\nencoders = [[1, 15]]\ndecoders = [[1, 32]]\n")
    assert run("sweep", "--config", p) == 1


def test_module_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "navil.cli", "pack-debug", "--image", "32x32"],
                         capture_output=True, text=True, check=True)
    assert json.loads(out.stdout)["length"] == 5
