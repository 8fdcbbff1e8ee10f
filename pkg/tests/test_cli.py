import numpy as np
import pytest
import yaml
from numpy.testing import assert_allclose
from PIL import Image

from dynfield import cli, io
from dynfield import config as cf
from dynfield.phantom import GridImage

TINY = {
    "system": {"pixels_per_side_Ns": 8, "n_frames_K": 4, "rings_per_view_I": 10, "quadrature_points_Q": 32,
               "rotation_dtheta": 45.0},
    "train": {"width": 8, "depth": 2, "n_partitions": 4, "space_degree": 1, "time_degree": 1, "batch_frames": 2,
              "inner_epochs": 3, "inner_epochs_eta": 1, "outer_max_iter": 2, "static_outer_iter": 1,
              "tv_samples": 64, "qnorm_samples": 64},
    "prox": {"max_iter": 20, "tv_inner_iter": 5},
    "embed": {"epochs": 2, "steps_per_epoch": 2, "samples": 128, "c_samples": 256, "ranks": [1, 2],
              "tac_points": [[0.1, 0.1], [-0.5, 0.3]]},
    "sweep": {"axis": "views", "values": [2, 4]},
    "grids": {"nf-tv": {"center": 0.1, "n": 2}, "pw-tv": {"center": 0.5, "n": 3}, "pw-nn": {"center": 1.0, "n": 3}},
    "supersample": 2,
}


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


def run(cfg_path, out, *args, extra=()):
    return cli.main([*args, "--config", str(cfg_path), "--output", str(out), *extra])


def test_config_roundtrip_and_hash(tiny_cfg, tmp_path):
    cfg = cf.load(tiny_cfg)
    again = cf.from_dict(yaml.safe_load(cfg.to_yaml()))
    assert again.digest() == cfg.digest()
    assert cf.load(tiny_cfg, overrides={"output": "elsewhere"}).digest() == cfg.digest()
    assert cf.load(tiny_cfg, overrides={"noise_seed": 3}).digest() != cfg.digest()
    desk = cf.load()
    assert desk.system.pixels_per_side_Ns == 64 and desk.system.n_frames_K == 32
    assert desk.system.quadrature_points_Q == 256 and desk.sweep_values == (2, 4, 8)
    paper = cf.load(profile="paper")
    assert paper.system.pixels_per_side_Ns == 200 and paper.system.n_frames_K == 180
    assert paper.train.width == 140 and paper.train.n_partitions == 40


def test_config_errors(tmp_path):
    with pytest.raises(cf.ConfigError):
        cf.from_dict({"sweep": {"axis": "views"}})
    with pytest.raises(cf.ConfigError):
        cf.from_dict({"train": {"widht": 3}})
    with pytest.raises(cf.ConfigError):
        cf.from_dict({"methods": ["fbp"]})
    with pytest.raises(cf.ConfigError):
        cf.from_dict({"profile": "laptop"})
    bad = tmp_path / "bad.yaml"
    bad.write_text("system: [1, 2")
    assert cli.main(["phantom", "--config", str(bad), "--output", str(tmp_path / "o")]) == 2
    assert cli.main(["phantom", "--set", "train.q=2", "--output", str(tmp_path / "o")]) == 2
    assert cli.main(["nonsense"]) == 2


def test_phantom_files_and_determinism(tiny_cfg, tmp_path):
    out = tmp_path / "a" / "b"
    assert run(tiny_cfg, out, "phantom") == 0
    _, meta, _ = io.read_container(out / "phantom" / "truth.img")
    assert meta["dims"] == [8, 8, 4]
    _, meta_g, _ = io.read_container(out / "phantom" / "truth_gen.img")
    assert meta_g["dims"] == [16, 16, 4]
    assert meta["config_hash"] == cf.load(tiny_cfg).digest()
    assert len(list((out / "phantom" / "preview").glob("*.png"))) == 4
    echo = yaml.safe_load((out / "config.yaml").read_text())
    assert echo["system"]["pixels_per_side_Ns"] == 8 and "lr_total_decay" in echo["train"]
    first = (out / "phantom" / "truth.img").read_bytes()
    assert run(tiny_cfg, out, "phantom") == 0
    assert (out / "phantom" / "truth.img").read_bytes() == first


def test_output_env_override(tiny_cfg, tmp_path, monkeypatch):
    target = tmp_path / "env_root"
    monkeypatch.setenv(cf.OUTPUT_ENV, str(target))
    assert run(tiny_cfg, tmp_path / "ignored", "svd") == 0
    assert (target / "svd" / "spectrum.csv").exists()
    assert not (tmp_path / "ignored").exists()


def test_simulate(tiny_cfg, tmp_path):
    out = tmp_path / "sim"
    assert run(tiny_cfg, out, "simulate") == 0
    clean, _ = io.load_sinogram(out / "simulate" / "S2" / "clean.sino")
    noisy, _ = io.load_sinogram(out / "simulate" / "S2" / "noisy.sino")
    assert clean.frames.shape == (4, 2 * 10)
    assert noisy.frames.size == 4 * 2 * 10
    assert_allclose(noisy.sigma, 0.025 * np.max(np.abs(clean.frames)), rtol=1e-14)
    out0 = tmp_path / "sim0"
    assert run(tiny_cfg, out0, "simulate", extra=["--set", "system.relative_noise=0"]) == 0
    c0, _ = io.load_sinogram(out0 / "simulate" / "S4" / "clean.sino")
    n0, _ = io.load_sinogram(out0 / "simulate" / "S4" / "noisy.sino")
    assert np.array_equal(c0.frames, n0.frames) and n0.sigma == 0


def test_svd_spectrum(tiny_cfg, tmp_path):
    out = tmp_path / "svd"
    assert run(tiny_cfg, out, "svd") == 0
    rows = np.genfromtxt(out / "svd" / "spectrum.csv", delimiter=",", names=True)
    assert len(rows) == 4
    assert np.all(np.diff(rows["singular_value"]) <= 0)
    assert_allclose(rows["energy_fraction"][-1], 1.0, rtol=1e-12)


def test_embed_report(tiny_cfg, tmp_path):
    out = tmp_path / "emb"
    assert run(tiny_cfg, out, "embed") == 0
    rows = np.genfromtxt(out / "embed" / "report.csv", delimiter=",", names=True, dtype=None, encoding="ascii")
    N, K = 64, 4
    nf = rows[rows["method"] == "nf"][0]
    ss = rows[rows["method"] == "ss"]
    assert nf["rrmse"] < 1
    for r in ss:
        assert r["params"] == r["rank"] * (N + K)
        assert_allclose(r["rrmse"], r["eckart_young_rrmse"], rtol=1e-6)
    tac = np.genfromtxt(out / "embed" / "tac.csv", delimiter=",", names=True)
    assert len(tac) == K and "truth_p1" in tac.dtype.names
    assert (out / "embed" / "timing.csv").exists()
    assert "seconds" not in (out / "embed" / "report.csv").read_text()


def test_reconstruct_rows_morozov_and_determinism(tiny_cfg, tmp_path):
    reports = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        assert run(tiny_cfg, out, "reconstruct", extra=["--methods", "pw-tv", "pw-nn", "nf-tv"]) == 0
        reports.append((out / "reconstruct" / "report.csv").read_bytes())
    assert reports[0] == reports[1]
    rows = np.genfromtxt(tmp_path / "r1" / "reconstruct" / "report.csv", delimiter=",", names=True, dtype=None,
                         encoding="ascii")
    assert len(rows) == 2 * 3
    for r in rows:
        assert r["flagged"] == 1 or r["residual2"] <= r["threshold"]
    nn = rows[rows["method"] == "pw-nn"]
    assert np.all(nn["params"] == nn["rank"] * (64 + 4))
    base = tmp_path / "r1" / "reconstruct" / "S2"
    assert len(list((base / "pw-tv" / "frames").glob("frame_*.png"))) == 4
    assert list((base / "nf-tv" / "checkpoints").glob("gamma_*/iter_*.pounet"))
    assert (base / "nf-tv" / "morozov.csv").exists()


def test_reconstruct_point_selection(tiny_cfg, tmp_path):
    out = tmp_path / "sel"
    assert run(tiny_cfg, out, "reconstruct", extra=["--methods", "pw-nn", "--points", "S4"]) == 0
    text = (out / "reconstruct" / "report.csv").read_text().splitlines()
    assert len(text) == 2 and text[1].startswith("S4,pw-nn")
    assert run(tiny_cfg, out, "reconstruct", extra=["--points", "S16"]) == 2


def test_stale_inputs_refused(tiny_cfg, tmp_path):
    out = tmp_path / "stale"
    assert run(tiny_cfg, out, "phantom") == 0
    assert run(tiny_cfg, out, "simulate", extra=["--set", "phantom_seed=5"]) == 2


def _save(path, values, h="h"):
    img = GridImage(values, 0.1, np.arange(values.shape[1], dtype=float))
    io.save_grid_image(path, img, h)
    return path


def test_render(tmp_path):
    z = _save(tmp_path / "z.img", np.zeros((16, 3)))
    assert cli.main(["render", str(z), "--out", str(tmp_path / "zf")]) == 0
    frames = sorted((tmp_path / "zf").glob("frame_*.png"))
    assert len(frames) == 3
    assert all(np.asarray(Image.open(f)).max() == 0 for f in frames)
    v = np.stack([np.linspace(0, 1, 16), np.linspace(0, 2, 16)], axis=1)
    f = _save(tmp_path / "v.img", v)
    assert cli.main(["render", str(f), "--out", str(tmp_path / "vf"), "--window", "0", "2"]) == 0
    a = np.asarray(Image.open(tmp_path / "vf" / "frame_000.png")).astype(int)
    b = np.asarray(Image.open(tmp_path / "vf" / "frame_001.png")).astype(int)
    expect = np.round(np.clip(v / 2, 0, 1) * 255).astype(int)
    assert np.array_equal(a.ravel(), expect[:, 0]) and np.array_equal(b.ravel(), expect[:, 1])
    assert cli.main(["render", str(f), "--out", str(tmp_path / "x"), "--window", "2", "0"]) == 2
    assert cli.main(["render", str(tmp_path / "missing.img"), "--out", str(tmp_path / "x")]) == 2


def test_metrics(tmp_path, capsys):
    rng = np.random.default_rng(0)
    a = _save(tmp_path / "a.img", rng.random((256, 2)))
    assert cli.main(["metrics", str(a), str(a)]) == 0
    line = capsys.readouterr().out.splitlines()[1].split(",")
    assert float(line[1]) == 0.0 and float(line[2]) == pytest.approx(1.0, abs=1e-12)
    b = _save(tmp_path / "b.img", rng.random((64, 2)))
    assert cli.main(["metrics", str(a), str(b)]) == 2
    c = _save(tmp_path / "c.img", rng.random((256, 2)), h="other")
    assert cli.main(["metrics", str(a), str(c)]) == 2
    assert cli.main(["metrics", str(a), str(c), "--allow-mixed", "--out", str(tmp_path / "m.csv")]) == 0
    assert (tmp_path / "m.csv").read_text().startswith("file,rrmse,ssim")
