import json

import numpy as np
import pytest

from flowreg.cli import main
from flowreg.curation import synthetic_sequence
from flowreg.io import read_manifest, read_poses, write_point_cloud, write_sequence

TINY_YAML = """
synth: {n_samples: 5}
sampling: {v_d: 0.2, alpha_s: 0.08, r_s: 1.0}
model: {blocks: 1, hidden: 16, heads: 2, time_embed_dim: 16}
train: {epochs: 2, warmup_steps: 2}
sampler: {generations: 2}
evaluation: {cd_voxel: 0.2}
"""


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "cfg.yaml").write_text(TINY_YAML)
    return tmp_path


@pytest.mark.slow
def test_pipeline_end_to_end(workdir, capsys):
    assert main(["synth", "--config", "cfg.yaml"]) == 0
    assert len(list((workdir / "data").glob("sample_*/poses.txt"))) == 5
    meta = json.loads((workdir / "data" / "sample_00000" / "meta.json").read_text())
    assert meta["seeds"] == {"synth": 0, "index": 0} and meta["command"] == "synth"
    assert main(["preprocess", "--config", "cfg.yaml"]) == 0
    assert len(list((workdir / "cache").glob("*.npz"))) == 5
    assert main(["train", "--config", "cfg.yaml"]) == 0
    assert (workdir / "model.pfrg").is_file()
    assert (workdir / "model.pfrg.loss.csv").read_text().startswith("step,loss\n")
    assert main(["register", "--config", "cfg.yaml"]) == 0
    out = workdir / "registered" / "sample_00000"
    names, poses = read_poses(out / "poses.txt")
    n = len(read_manifest(workdir / "data" / "sample_00000").views)
    assert len(names) == n and len(list((out / "registered").glob("*.ply"))) == n
    assert main(["evaluate", "--config", "cfg.yaml"]) == 0
    first = ((workdir / "report" / "report.csv").read_bytes(), (workdir / "report" / "report.json").read_bytes())
    assert main(["evaluate", "--config", "cfg.yaml"]) == 0
    second = ((workdir / "report" / "report.csv").read_bytes(), (workdir / "report" / "report.json").read_bytes())
    assert first == second
    assert "SR" in capsys.readouterr().out
    # a second registration run is reproducible
    assert main(["register", "--config", "cfg.yaml", "--paths.output_dir=again"]) == 0
    assert (workdir / "again" / "sample_00000" / "poses.txt").read_bytes() == (out / "poses.txt").read_bytes()


def test_curate_from_sequence(workdir):
    write_sequence(workdir / "seq", synthetic_sequence(np.random.default_rng(0), n_frames=30))
    code = main(["curate", "--config", "cfg.yaml", "--paths.sequence_dir=seq", "--curation.tau_time=0.3",
                 "--curation.tau_space=0.5", "--curation.d_max=10.0", "--curation.eps_overlap=0.05",
                 "--curation.F_max=2", "--curation.N_max=3"])
    assert code == 0
    assert list((workdir / "data").glob("seq_*/poses.txt"))


def test_exit_codes(workdir, capsys):
    assert main(["synth", "--config", "cfg.yaml", "stray"]) == 2
    assert main(["synth", "--config", "cfg.yaml", "--sampler.bogus=1"]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["curate", "--config", "cfg.yaml"]) == 2
    assert main(["register", "--config", "cfg.yaml"]) == 2
    # a single view is a domain error
    (workdir / "one" / "views").mkdir(parents=True)
    write_point_cloud(np.random.default_rng(0).normal(size=(300, 3)), workdir / "one" / "views" / "a.ply")
    (workdir / "m.pfrg").write_bytes(b"")
    from flowreg.model import ModelConfig, VelocityField, save_model

    save_model(workdir / "m.pfrg", VelocityField(ModelConfig(blocks=1, hidden=16, heads=2, time_embed_dim=16)))
    code = main(["register", "--config", "cfg.yaml", "--paths.data_dir=one", "--paths.checkpoint=m.pfrg"])
    assert code == 1
    assert "TooFewViews" in capsys.readouterr().err
    assert main(["train", "--config", "cfg.yaml", "--paths.data_dir=one"]) == 1
