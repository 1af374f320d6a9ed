import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from cta_recon import cli
from cta_recon.io import load_mask, load_volume
from cta_recon.levelset import LevelSetError

SPEC = 'recipe = "clean-straight"\nlength_mm = 12.0\nsupersample = 4\n'


def run(*argv):
    return cli.main([str(a) for a in argv])


def manifest(path):
    return json.loads(path.read_text())


@pytest.fixture(scope="module")
def ph(tmp_path_factory):
    root = tmp_path_factory.mktemp("ph")
    (root / "spec.toml").write_text(SPEC)
    assert run("phantom", "--spec", root / "spec.toml", "--out", root / "ph") == 0
    truth = json.loads((root / "ph" / "truth.json").read_text())
    return root, truth["seeds"]["start"], truth["seeds"]["end"]


@pytest.fixture(scope="module")
def seg(ph):
    root, start, end = ph
    out = root / "seg"
    code = run("segment", "--input", root / "ph" / "volume.nrrd", "--start", start,
               "--end", end, "--out", out)
    return code, out


def test_phantom_outputs(ph):
    root, _, _ = ph
    m = manifest(root / "ph" / "manifest.json")
    assert m["status"] == "ok" and m["config"]["phantom"]["length_mm"] == 12.0
    for name in ("volume.nrrd", "lumen.nrrd", "outer.nrrd", "plaque.nrrd", "centerline.csv",
                 "truth.json"):
        assert str(root / "ph" / name) in m["outputs"]
        assert (root / "ph" / name).exists()


def test_segment_end_to_end(seg, ph):
    code, out = seg
    assert code == 0
    m = manifest(out / "manifest.json")
    assert m["status"] == "ok" and m["exit_code"] == 0
    assert all(Path(p).exists() for p in m["outputs"])
    assert str(out / "lumen.stl") in m["outputs"]
    assert {"lumen", "outer_wall", "plaque"} <= set(m["timings_ms"])
    assert m["config"]["thresholds"]["l_thres"] == 80.0
    assert len(m["inputs"]) == 1 and all(len(h) == 64 for h in m["inputs"].values())
    for name in ("lumen.nrrd", "outer.nrrd", "plaque.nrrd", "phi_lumen.nrrd",
                 "centerline.csv", "report.json", "sections.csv", "lumen.stl"):
        assert (out / name).exists(), name
    root = out.parent
    lumen = load_mask(out / "lumen.nrrd").values
    truth = load_mask(root / "ph" / "lumen.nrrd").values
    assert 2 * (lumen & truth).sum() / (lumen.sum() + truth.sum()) >= 0.85


def test_compare_and_metrics(seg, ph):
    root, _, _ = ph
    _, out = seg
    assert run("compare", "--seg", out, "--ref", root / "ph", "--out", root / "cmp") == 0
    rep = json.loads((root / "cmp" / "report.json").read_text())
    assert rep["schema"] == 1 and set(rep["dice"]) == {"lumen", "outer", "plaque"}
    assert rep["mla_mm2"] == min(s["lumen_area"] for s in rep["sections"] if not s["excluded"])
    assert run("metrics", "--pred", out, "--ref", root / "ph", "--out", root / "met") == 0
    met = json.loads((root / "met" / "metrics.json").read_text())
    assert met["structures"]["lumen"]["dice"] == rep["dice"]["lumen"]


def test_mesh_command(seg, ph):
    root, _, _ = ph
    _, out = seg
    assert run("mesh", "--input", out / "phi_lumen.nrrd", "--format", "obj",
               "--out", root / "mesh") == 0
    m = manifest(root / "mesh" / "manifest.json")
    assert m["mesh"]["triangles"] > 0
    assert (root / "mesh" / "phi_lumen.obj").exists()


def test_deterministic_outputs(ph, seg, tmp_path):
    root, start, end = ph
    _, out = seg
    code = run("segment", "--input", root / "ph" / "volume.nrrd", "--start", start,
               "--end", end, "--out", tmp_path / "again")
    assert code == 0
    for name in ("lumen.nrrd", "outer.nrrd", "phi_lumen.nrrd", "centerline.csv", "lumen.stl",
                 "sections.csv"):
        assert cli.sha256_path(out / name) == cli.sha256_path(tmp_path / "again" / name), name


def test_voxel_seeds_and_config(ph, tmp_path):
    root, start, end = ph
    vol = load_volume(root / "ph" / "volume.nrrd")
    si, ei = (vol.world_to_voxel(np.array([float(v) for v in p.split(",")]))
              for p in (start, end))
    (tmp_path / "c.toml").write_text("[thresholds]\nl_thres = 70.0\n")
    code = run("centerline", "--input", root / "ph" / "volume.nrrd",
               "--start-voxel", ",".join(str(int(i)) for i in si),
               "--end-voxel", ",".join(str(int(i)) for i in ei),
               "--config", tmp_path / "c.toml", "--out", tmp_path / "cl")
    assert code == 0
    m = manifest(tmp_path / "cl" / "manifest.json")
    assert m["config"]["thresholds"]["l_thres"] == 70.0
    assert m["config"]["thresholds"]["cp_thres"] == 400.0
    assert m["config"]["stages"]["lumen_pass1"]["iterations"] == 200
    assert str(tmp_path / "c.toml") in m["inputs"]


def test_missing_end_is_usage_error(ph, tmp_path, capsys):
    root, start, _ = ph
    code = run("segment", "--input", root / "ph" / "volume.nrrd", "--start", start,
               "--out", tmp_path / "o")
    assert code == 1
    assert "usage:" in capsys.readouterr().err
    m = manifest(tmp_path / "o" / "manifest.json")
    assert m["status"] == "input_error" and m["exit_code"] == 1


def test_seed_flags_mutually_exclusive(ph, tmp_path):
    root, start, end = ph
    code = run("segment", "--input", root / "ph" / "volume.nrrd", "--start", start,
               "--start-voxel", "1,1,1", "--end", end, "--out", tmp_path / "o")
    assert code == 1


def test_unknown_flag(tmp_path, capsys):
    assert run("vesselness", "--input", "x.nrrd", "--bogus", "--out", tmp_path) == 1
    assert "unrecognized arguments" in capsys.readouterr().err
    assert manifest(tmp_path / "manifest.json")["status"] == "input_error"


def test_unknown_config_key(ph, tmp_path):
    root, start, end = ph
    (tmp_path / "bad.toml").write_text("[thresholds]\nl_thresh = 1.0\n")
    code = run("segment", "--input", root / "ph" / "volume.nrrd", "--start", start,
               "--end", end, "--config", tmp_path / "bad.toml", "--out", tmp_path / "o")
    assert code == 1
    m = manifest(tmp_path / "o" / "manifest.json")
    assert "l_thresh" in m["error"] and m["outputs"] == []


def test_seed_outside_volume(ph, tmp_path):
    root, start, _ = ph
    code = run("segment", "--input", root / "ph" / "volume.nrrd", "--start", start,
               "--end", "500,500,500", "--out", tmp_path / "o")
    assert code == 1
    assert "end seed" in manifest(tmp_path / "o" / "manifest.json")["error"]


def test_missing_input(tmp_path):
    code = run("vesselness", "--input", tmp_path / "nope.nrrd", "--out", tmp_path / "o")
    assert code == 1
    m = manifest(tmp_path / "o" / "manifest.json")
    assert "nope.nrrd" in m["error"] and m["inputs"][str(tmp_path / "nope.nrrd")] is None


def test_numerical_failure_exit_code(ph, tmp_path, monkeypatch):
    root, _, _ = ph

    def boom(args, manifest):
        raise LevelSetError("contour vanished")

    monkeypatch.setitem(cli.COMMANDS, "vesselness", boom)
    code = run("vesselness", "--input", root / "ph" / "volume.nrrd", "--out", tmp_path / "o")
    assert code == 2
    m = manifest(tmp_path / "o" / "manifest.json")
    assert m["status"] == "numerical_failure" and "vanished" in m["error"]


def test_manifest_override_path(tmp_path):
    code = run("phantom", "nope", "--out", tmp_path / "o", "--manifest", tmp_path / "m.json")
    assert code == 1
    assert "unknown phantom recipe" in manifest(tmp_path / "m.json")["error"]


def test_phantom_list(capsys):
    assert run("phantom", "--list") == 0
    assert "stenosed-50" in capsys.readouterr().out.split()


def test_jobs_fan_out(ph, tmp_path):
    root, start, end = ph
    vol = root / "ph" / "volume.nrrd"
    copy = tmp_path / "copy.nrrd"
    copy.write_bytes(vol.read_bytes())
    code = run("vesselness", "--input", vol, "--out", tmp_path / "v")
    assert code == 0
    code = run("segment", "--input", vol, copy, "--start", start, "--end", end, "--jobs", "2",
               "--no-mesh", "--out", tmp_path / "multi")
    assert code == 0
    m = manifest(tmp_path / "multi" / "manifest.json")
    assert set(m["timings_ms"]) == {"volume", "copy"}
    a, b = (cli.sha256_path(tmp_path / "multi" / s / "lumen.nrrd") for s in ("volume", "copy"))
    assert a == b


def test_log_env(tmp_path):
    env = {"CTA_RECON_LOG": "DEBUG", "PATH": ""}
    proc = subprocess.run([sys.executable, "-m", "cta_recon", "phantom", "--list"],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 0 and "clean-straight" in proc.stdout
