import json
import os
import subprocess
import sys

import pytest

from pgdiff.config import (InvalidValue, ParseError, UnknownKey, config_from_dict,
                           config_hash, parse_config, to_dict, to_json)

# ---------------------------------------------------------------------------
# config parsing

def test_empty_object_gives_all_defaults():
    cfg = config_from_dict({})
    assert cfg.seed == 0
    assert cfg.schedule.train_steps == 1000
    assert cfg.schedule.inference_steps == 250
    assert cfg.schedule.variance_preserving is True
    assert cfg.sampler.t_prime == 100
    assert cfg.sampler.window == 0
    assert cfg.denoiser.image_size == 16
    assert cfg.dataset.n_scenes == 64
    assert cfg.dataset.eval_scenes == 8
    assert cfg.dataset.frames_per_scene == 8
    assert cfg.training.steps == 2000
    assert cfg.training.batch_size == 8
    assert cfg.training.lr == 3e-4
    assert cfg.paths.data_dir == ""


def test_round_trip_is_canonical():
    data = {"seed": 7,
            "schedule": {"inference_steps": 50},
            "sampler": {"t_prime": 25, "window": 3},
            "dataset": {"n_scenes": 4, "trajectory": {"forward_step": 0.1}},
            "training": {"steps": 10, "lr": 1e-3}}
    cfg = config_from_dict(data)
    assert cfg.dataset.trajectory.forward_step == 0.1
    again = config_from_dict(to_dict(cfg))
    assert again == cfg
    assert to_json(again) == to_json(cfg)
    assert config_hash(again) == config_hash(cfg)


def test_explicit_default_hashes_like_implicit():
    assert config_hash(config_from_dict({})) == config_hash(config_from_dict({"seed": 0}))
    assert config_hash(config_from_dict({"seed": 1})) != config_hash(config_from_dict({}))


def test_unknown_keys_rejected():
    with pytest.raises(UnknownKey):
        config_from_dict({"sede": 1})
    with pytest.raises(UnknownKey):
        config_from_dict({"training": {"stepz": 5}})
    with pytest.raises(UnknownKey):
        config_from_dict({"dataset": {"trajectory": {"sideways": 1.0}}})


def test_type_errors_rejected():
    with pytest.raises(InvalidValue):
        config_from_dict({"seed": "abc"})
    with pytest.raises(InvalidValue):
        config_from_dict({"seed": True})  # bools are not integers here
    with pytest.raises(InvalidValue):
        config_from_dict({"training": {"lr": "fast"}})
    with pytest.raises(InvalidValue):
        config_from_dict({"denoiser": {"channel_multiples": "12"}})
    with pytest.raises(InvalidValue):
        config_from_dict({"schedule": 3})
    with pytest.raises(InvalidValue):
        config_from_dict([1, 2])


def test_constraint_violations_rejected():
    with pytest.raises(InvalidValue):
        config_from_dict({"sampler": {"t_prime": 300}})  # beyond inference steps
    with pytest.raises(InvalidValue):
        config_from_dict({"schedule": {"inference_steps": 2000}})
    with pytest.raises(InvalidValue):
        config_from_dict({"training": {"steps": 0}})
    with pytest.raises(InvalidValue):
        config_from_dict({"dataset": {"n_scenes": 0}})
    with pytest.raises(InvalidValue):
        config_from_dict({"dataset": {"frames_per_scene": 1}})
    # dataset frames must agree with the denoiser input size
    with pytest.raises(InvalidValue):
        config_from_dict({"dataset": {"height": 8, "width": 8}})
    cfg = config_from_dict({"dataset": {"height": 8, "width": 8},
                            "denoiser": {"image_size": 8}})
    assert cfg.denoiser.image_size == 8
    # denoiser's own invariants surface as config errors too
    with pytest.raises(InvalidValue):
        config_from_dict({"denoiser": {"head_channels": 24}})


def test_parse_config_file_errors(tmp_path):
    with pytest.raises(ParseError):
        parse_config(str(tmp_path / "missing.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("{\"seed\": }")
    with pytest.raises(ParseError, match="line 1"):
        parse_config(str(bad))


def test_parse_config_matches_from_dict(tmp_path):
    data = {"seed": 11, "training": {"steps": 5}}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(data))
    assert parse_config(str(path)) == config_from_dict(data)


# ---------------------------------------------------------------------------
# command line

CLI_CFG = {
    "seed": 3,
    "schedule": {"inference_steps": 10},
    "sampler": {"t_prime": 4},
    "dataset": {"n_scenes": 2, "eval_scenes": 1, "frames_per_scene": 3},
    "training": {"steps": 25, "batch_size": 4, "log_every": 10},
}


def run_cli(*args):
    return subprocess.run([sys.executable, "-m", "pgdiff.cli", *map(str, args)],
                          capture_output=True, text=True)


def tree_bytes(root, skip=("manifest.json",)):
    """Relative path -> file bytes, ignoring path-bearing manifests."""
    out = {}
    for base, _, files in os.walk(root):
        for f in files:
            if f in skip:
                continue
            p = os.path.join(base, f)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = fh.read()
    return out


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One gen-data + train + sample chain shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "cfg.json"
    cfg_path.write_text(json.dumps(CLI_CFG))

    data = root / "data"
    r = run_cli("gen-data", "--config", cfg_path, "--out", data, "--quiet")
    assert r.returncode == 0, r.stderr

    run_dir = root / "run"
    r = run_cli("train", "--config", cfg_path, "--data", data, "--out", run_dir,
                "--quiet")
    assert r.returncode == 0, r.stderr

    seq_dir = root / "seq"
    r = run_cli("sample", "--config", cfg_path, "--ckpt", run_dir / "ckpt.pgdm",
                "--out", seq_dir, "--quiet")
    assert r.returncode == 0, r.stderr
    return {"root": root, "cfg": cfg_path, "data": data, "run": run_dir,
            "seq": seq_dir}


def test_gen_data_reproducible_and_thread_invariant(workspace, tmp_path):
    again = tmp_path / "again"
    r = run_cli("gen-data", "--config", workspace["cfg"], "--out", again,
                "--threads", "2", "--quiet")
    assert r.returncode == 0, r.stderr
    assert tree_bytes(again) == tree_bytes(workspace["data"])


def test_train_reproducible(workspace, tmp_path):
    again = tmp_path / "run2"
    r = run_cli("train", "--config", workspace["cfg"], "--data", workspace["data"],
                "--out", again, "--quiet")
    assert r.returncode == 0, r.stderr
    for name in ("ckpt.pgdm", "losses.json"):
        with open(workspace["run"] / name, "rb") as a, open(again / name, "rb") as b:
            assert a.read() == b.read(), name


def test_sample_reproducible(workspace, tmp_path):
    again = tmp_path / "seq2"
    r = run_cli("sample", "--config", workspace["cfg"],
                "--ckpt", workspace["run"] / "ckpt.pgdm", "--out", again, "--quiet")
    assert r.returncode == 0, r.stderr
    a = tree_bytes(workspace["seq"])
    b = tree_bytes(again)
    assert set(a) == set(b)
    for name in a:
        if name.endswith(".png"):
            assert a[name] == b[name], name


def test_sample_seed_changes_frames(workspace, tmp_path):
    other = tmp_path / "seq3"
    r = run_cli("sample", "--config", workspace["cfg"], "--seed", "99",
                "--ckpt", workspace["run"] / "ckpt.pgdm", "--out", other, "--quiet")
    assert r.returncode == 0, r.stderr
    a = tree_bytes(workspace["seq"])
    b = tree_bytes(other)
    assert any(a[n] != b[n] for n in a if n.endswith(".png"))


def test_manifest_replays_gen_data(workspace, tmp_path):
    from pgdiff.pipeline import gen_data

    manifest = json.loads((workspace["data"] / "manifest.json").read_text())
    assert manifest["command"] == "gen-data"
    cfg = config_from_dict(manifest["config"])
    assert config_hash(cfg) == manifest["config_hash"]
    replay = tmp_path / "replay"
    gen_data(cfg, str(replay))
    assert tree_bytes(replay) == tree_bytes(workspace["data"])


def test_eval_scene_against_itself(workspace, tmp_path):
    out = tmp_path / "report"
    scene = workspace["data"] / "train" / "scene_000"
    r = run_cli("eval", "--config", workspace["cfg"], "--data", scene,
                "--out", out, "--quiet")
    assert r.returncode == 0, r.stderr
    assert "psnr_db" in r.stdout
    report = json.loads((out / "report.json").read_text())
    assert report["warp_error"] < 2.0 / 255.0
    assert all(p == 99.0 for p in report["psnr"])


def test_interpolate_runs(workspace, tmp_path):
    out = tmp_path / "interp"
    r = run_cli("interpolate", "--config", workspace["cfg"],
                "--ckpt", workspace["run"] / "ckpt.pgdm", "--out", out, "--quiet")
    assert r.returncode == 0, r.stderr
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest["frames"]) == CLI_CFG["dataset"]["frames_per_scene"]
    assert manifest["metadata"]["anchor_indices"] == [0, 2]


def test_inspect_epipolar_outputs(workspace, tmp_path):
    out = tmp_path / "inspect"
    r = run_cli("inspect-epipolar", "--config", workspace["cfg"], "--out", out,
                "--pixel", "3,4", "--quiet")
    assert r.returncode == 0, r.stderr
    assert (out / "matrix.pgm").exists()
    assert (out / "map_3_4.pgm").exists()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["matrix"]["max"] <= 1.0
    assert summary["maps"][0]["pixel"] == [3, 4]


def test_exit_code_usage_error():
    r = run_cli("no-such-command")
    assert r.returncode == 2
    assert "usage" in r.stderr.lower()
    r = run_cli("train")  # --out is required
    assert r.returncode == 2


def test_exit_code_config_error(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{\"seed\": }")
    r = run_cli("gen-data", "--config", bad, "--out", tmp_path / "x")
    assert r.returncode == 3
    assert "config error" in r.stderr
    r = run_cli("train", "--out", tmp_path / "y")  # no --data anywhere
    assert r.returncode == 3


def test_exit_code_runtime_error(tmp_path):
    r = run_cli("eval", "--data", tmp_path / "nope", "--out", tmp_path / "z")
    assert r.returncode == 1
    assert "error" in r.stderr


def test_bad_pixel_spec_is_config_error(tmp_path):
    r = run_cli("inspect-epipolar", "--out", tmp_path / "w", "--pixel", "oops")
    assert r.returncode == 3
    r = run_cli("inspect-epipolar", "--out", tmp_path / "w2", "--pixel", "99,0")
    assert r.returncode == 3
