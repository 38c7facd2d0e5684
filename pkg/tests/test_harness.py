import json
from dataclasses import replace
from pathlib import Path

import pytest

from eventransact._serde import ConfigError
from eventransact.events_io import SynthParams
from eventransact.frames import AugmentConfig, EncoderConfig
from eventransact.harness.cli import main
from eventransact.harness.config import RunConfig, load_run_config, save_run_config
from eventransact.harness.manifest import (
    DVS_CLASS_NAMES,
    DatasetManifest,
    ManifestSample,
    SynthCorpusSpec,
    build_dvs_manifest,
    build_synth_manifest,
)
from eventransact.model import ModelConfig
from eventransact.pipeline import TrainConfig

from oracles import aedat_header, aedat_packet


# -- DVS manifests -----------------------------------------------------------


def write_trial(root: Path, name: str, segments):
    events = [(1 + i % 5, 2 + i % 7, i % 2, 1000 * i, True) for i in range(40)]
    (root / f"{name}.aedat").write_bytes(aedat_header() + aedat_packet(1, events))
    rows = "".join(f"{c},{a},{b}\n" for c, a, b in segments)
    (root / f"{name}_labels.csv").write_text("class,startTime_usec,endTime_usec\n" + rows)


@pytest.fixture
def dvs_root(tmp_path):
    segs = [(1, 0, 10_000), (11, 10_000, 20_000), (4, 20_000, 39_001)]
    for user in (1, 5, 23, 24, 29):
        write_trial(tmp_path, f"user{user:02d}_fluorescent", segs)
    return tmp_path


def test_dvs_eleven_class(dvs_root):
    train, test = build_dvs_manifest(dvs_root, "11class")
    assert len(train.class_names) == 11 and train.class_names == list(DVS_CLASS_NAMES)
    assert len(train.samples) == 9 and len(test.samples) == 6
    assert sorted({s.label for s in train.samples}) == [0, 3, 10]


def test_dvs_ten_class_drops_background(dvs_root):
    train, test = build_dvs_manifest(dvs_root, "10class")
    assert len(train.class_names) == 10
    for m in (train, test):
        assert all(s.segment.class_id != 11 for s in m.samples)
        assert all(s.label < 10 for s in m.samples)
    assert len(train.samples) == 6


def test_dvs_subject_disjoint(dvs_root):
    train, test = build_dvs_manifest(dvs_root)
    assert train.subjects() == {"user01", "user05", "user23"}
    assert test.subjects() == {"user24", "user29"}
    assert not train.subjects() & test.subjects()


def test_dvs_samples_load_segment(dvs_root):
    train, _ = build_dvs_manifest(dvs_root)
    first = train.samples[0].load()
    assert len(first) == 10 and first.t[0] == 0 and first.t[-1] == 9000
    last = train.samples[2].load()
    assert len(last) == 20


def test_dvs_explicit_listing(dvs_root):
    (dvs_root / "trials_to_train.txt").write_text("user01_fluorescent.aedat\nuser24_fluorescent.aedat\n")
    (dvs_root / "trials_to_test.txt").write_text("user05_fluorescent.aedat\n")
    train, test = build_dvs_manifest(dvs_root)
    assert train.subjects() == {"user01", "user24"} and test.subjects() == {"user05"}


def test_dvs_listing_overlap_rejected(dvs_root):
    (dvs_root / "trials_to_train.txt").write_text("user01_fluorescent.aedat\n")
    (dvs_root / "trials_to_test.txt").write_text("user01_fluorescent.aedat\n")
    with pytest.raises(ValueError, match="user01"):
        build_dvs_manifest(dvs_root)


def test_dvs_missing_labels(dvs_root):
    (dvs_root / "user05_fluorescent_labels.csv").unlink()
    with pytest.raises(FileNotFoundError, match="user05"):
        build_dvs_manifest(dvs_root)


def test_manifest_rejects_bad_label():
    with pytest.raises(ValueError):
        DatasetManifest("x", ["a", "b"], [ManifestSample("s", "p", 2)])


def test_manifest_round_trip(dvs_root, tmp_path):
    train, _ = build_dvs_manifest(dvs_root)
    train.save(dvs_root / "train.json")
    back = DatasetManifest.load(dvs_root / "train.json")
    assert [(s.source_id, s.label, s.segment) for s in back.samples] == [
        (s.source_id, s.label, s.segment) for s in train.samples
    ]
    assert back.samples[0].load() == train.samples[0].load()


# -- synthetic corpus --------------------------------------------------------


def small_corpus():
    return SynthCorpusSpec(params=SynthParams(32, 32, 50_000, 0.01))


def test_synth_manifest_counts(tmp_path):
    train, test = build_synth_manifest(small_corpus(), 0, tmp_path)
    assert (len(train.samples), len(test.samples)) == (32, 16)
    assert train.class_histogram() == [8, 8, 8, 8] and test.class_histogram() == [4, 4, 4, 4]
    assert (tmp_path / "train.json").exists() and (tmp_path / "test.json").exists()


def test_synth_corpus_byte_identical(tmp_path):
    build_synth_manifest(small_corpus(), 7, tmp_path / "a")
    build_synth_manifest(small_corpus(), 7, tmp_path / "b")
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_synth_zero_count_rejected(tmp_path):
    with pytest.raises(ValueError):
        build_synth_manifest(replace(small_corpus(), test_per_class=0), 0, tmp_path)


# -- run config --------------------------------------------------------------


def tiny_run(tmp_path, **kw):
    model = ModelConfig(image_size=32, patch_size=16, embed_dim=16, spatial_depth=1, spatial_heads=2,
                        temporal_layers=1, temporal_heads=2, attention_window=2, clip_len=4, num_classes=4,
                        proj_hidden=16, proj_dim=8)
    train = TrainConfig(epochs=2, warmup_epochs=1, base_lr=1e-3, batch_size=8, clip_len=4, eval_clips=2,
                        encoder=EncoderConfig(10_000, 32),
                        augment=AugmentConfig(rho_choices=(5_000, 10_000)))
    return RunConfig(model, train, output_dir=str(tmp_path / "run"), **kw)


def test_run_config_round_trip(tmp_path):
    cfg = tiny_run(tmp_path, train_manifest="a.json")
    assert RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    save_run_config(cfg, tmp_path / "c.json")
    assert load_run_config(tmp_path / "c.json") == cfg
    assert RunConfig.from_dict(RunConfig().to_dict()) == RunConfig()


@pytest.mark.parametrize(
    "patch,path",
    [
        ({"train": {"base_lr": "fast"}}, "$.train.base_lr"),
        ({"model": {"embed_dim": 16, "wings": 2}}, "$.model.wings"),
        ({"train": {"augment": {"rho_choices": [1, "x"]}}}, "$.train.augment.rho_choices[1]"),
        ({"train": {"clip_len": 5}}, "$.train.clip_len"),
        ({"train": {"encoder": {"spatial_size": 64}}}, "$.train.encoder.spatial_size"),
    ],
)
def test_config_errors_name_json_path(tmp_path, patch, path):
    data = tiny_run(tmp_path).to_dict()
    for key, sub in patch.items():
        node = data[key]
        for k, v in sub.items():
            if isinstance(v, dict):
                node[k].update(v)
            else:
                node[k] = v
    with pytest.raises(ConfigError) as err:
        RunConfig.from_dict(data)
    assert err.value.path == path


# -- CLI ---------------------------------------------------------------------


def run_cli(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_cli_gradcheck(capsys):
    code, out, _ = run_cli(["gradcheck", "--max-coords", "8"], capsys)
    assert code == 0
    assert out.startswith("max_rel_error=") and float(out.split()[0].split("=")[1]) <= 1e-4


def test_cli_missing_config(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    code, _, err = run_cli(["train", "--config", missing], capsys)
    assert code != 0
    payload = json.loads(err.strip())
    assert str(missing) in payload["message"]


def test_cli_invalid_config_reports_path(tmp_path, capsys):
    data = tiny_run(tmp_path).to_dict()
    data["train"]["base_lr"] = "fast"
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(data))
    code, _, err = run_cli(["train", "--config", path], capsys)
    payload = json.loads(err.strip())
    assert code == 2 and payload["error"] == "config" and payload["path"] == "$.train.base_lr"


def test_cli_unknown_flag(capsys):
    code, _, err = run_cli(["train", "--colour", "red"], capsys)
    assert code == 2 and json.loads(err.strip())["error"] == "usage"
    assert len(err.strip().splitlines()) == 1


def test_cli_thread_env_validated(monkeypatch, capsys):
    monkeypatch.setenv("EVENTRANSACT_THREADS", "many")
    code, _, err = run_cli(["gradcheck", "--max-coords", "1"], capsys)
    assert code == 2 and "EVENTRANSACT_THREADS" in err


def test_cli_end_to_end(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("EVENTRANSACT_THREADS", "1")
    corpus = tmp_path / "corpus"
    code, out, _ = run_cli(
        ["synth", "--out", corpus, "--size", 32, "--duration-usec", 60_000, "--rate", 0.01,
         "--train-per-class", 2, "--test-per-class", 1],
        capsys,
    )
    assert code == 0 and json.loads(out) == {"train": 8, "test": 4, "out": str(corpus)}
    assert (corpus / "resolved_config.json").exists()

    cfg = tiny_run(tmp_path, train_manifest=str(corpus / "train.json"), test_manifest=str(corpus / "test.json"))
    save_run_config(cfg, tmp_path / "run.json")
    code, out, _ = run_cli(["train", "--config", tmp_path / "run.json"], capsys)
    assert code == 0
    summary = json.loads(out)
    run = Path(cfg.output_dir)
    assert summary["epochs"] == 2 and 0 <= summary["top1_accuracy"] <= 1
    assert load_run_config(run / "resolved_config.json") == cfg
    assert len((run / "train_log.jsonl").read_text().splitlines()) == 2

    args = ["eval", "--checkpoint", run / "checkpoint.ckpt", "--manifest", corpus / "test.json"]
    code1, out1, _ = run_cli(args + ["--out", tmp_path / "e1.json"], capsys)
    code2, out2, _ = run_cli(args + ["--out", tmp_path / "e2.json"], capsys)
    assert code1 == code2 == 0 and out1 == out2
    assert (tmp_path / "e1.json").read_text() == (tmp_path / "e2.json").read_text()
    assert json.loads(out1)["num_videos"] == 4
    assert (tmp_path / "e1.config.json").exists()

    code, out, _ = run_cli(["bench", "--checkpoint", run / "checkpoint.ckpt", "--manifest", corpus / "test.json",
                            "--out", tmp_path / "bench.json"], capsys)
    assert code == 0 and json.loads(out)["trials"] == 30

    code, _, err = run_cli(["eval", "--checkpoint", tmp_path / "missing.ckpt", "--manifest", corpus / "test.json"], capsys)
    assert code == 1 and "missing.ckpt" in json.loads(err)["message"]


def test_cli_prepare(dvs_root, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("EVENTRANSACT_THREADS", "2")
    out_dir = tmp_path / "prepared"
    enc = tmp_path / "enc.json"
    enc.write_text(json.dumps({"rho_usec": 5000, "spatial_size": 16}))
    code, out, _ = run_cli(["prepare", "--root", dvs_root, "--out", out_dir, "--protocol", "10class",
                            "--cache-frames", "--encoder", enc], capsys)
    assert code == 0 and json.loads(out) == {"train": 6, "test": 4, "out": str(out_dir)}
    train = DatasetManifest.load(out_dir / "train.json")
    assert all(s.kind == "frames" for s in train.samples)
    video = train.samples[0].load()
    assert video.to_array().shape[1:] == (16, 16, 2)
    assert (out_dir / "resolved_config.json").exists()
