"""Trainer, config parsing, CLI, and persistence behavior."""

import numpy as np
import pytest

from attnmine import cli
from attnmine.autodiff import Tensor
from attnmine.checkpoint import Checkpoint
from attnmine.errors import ConfigError, DataError
from attnmine.maps import Manifest, SampleSet, load_map
from attnmine.synth import SynthConfig, write_dataset
from attnmine.train import (
    TrainConfig,
    build_pipeline_from_checkpoint,
    evaluate,
    infer,
    parse_config_text,
    parse_resolution,
    train,
)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    cfg = SynthConfig(height=32, width=32, samples=14)
    write_dataset(cfg, root, seed=21)
    return root


@pytest.fixture(scope="module")
def short_run(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    res = train(TrainConfig(epochs=2, batch_size=4, seed=5), dataset, out)
    return res


# -- config parsing ---------------------------------------------------------

def test_parse_full_config():
    cfg = parse_config_text(
        """
        # optimizer
        lr = 0.002
        beta1 = 0.8
        epochs = 3          # short run
        batch_size = 2
        keb_strategy = concat
        keb_renormalize = false
        sources = s1, s2
        resolution = 32x48
        warmup_steps = 7
        """
    )
    assert cfg.lr == 0.002
    assert cfg.beta1 == 0.8
    assert cfg.epochs == 3
    assert cfg.keb_strategy == "concat"
    assert cfg.keb_renormalize is False
    assert cfg.sources == ("s1", "s2")
    assert cfg.resolution == "32x48"
    assert cfg.warmup_steps == 7


def test_parse_defaults_from_empty_text():
    assert parse_config_text("") == TrainConfig()
    assert parse_config_text("# nothing\n\n") == TrainConfig()


@pytest.mark.parametrize("text", [
    "unknown_key = 3",
    "lr",                       # no '='
    "lr = fast",                # bad float
    "epochs = 2.5",             # bad int
    "keb_renormalize = maybe",  # bad bool
    "lr = 1\nlr = 2",           # duplicate
    "lr = -0.5",
    "epochs = 0",
    "keb_strategy = fancy",
    "resolution = 64",
    "beta2 = 1.0",
    "warmup_steps = -2",
])
def test_parse_rejects_bad_config(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_parse_resolution():
    assert parse_resolution("64x48") == (64, 48)
    with pytest.raises(ConfigError):
        parse_resolution("64 x 48")


# -- training behavior ------------------------------------------------------

def test_loss_decreases_and_gt_untouched(short_run):
    losses = [h.train_loss for h in short_run.history]
    assert losses[-1] < losses[0]
    assert short_run.gt_reads_during_training == 0
    assert short_run.source_names == ("s1", "s2")
    assert short_run.best_checkpoint.is_file()
    assert short_run.last_checkpoint.is_file()


def test_history_has_validation_scores(short_run):
    for h in short_run.history:
        assert np.isfinite(h.val_kld) and h.val_kld >= 0
        assert -1.0 <= h.val_cc <= 1.0
        assert len(h.mean_e) == 2


def test_single_source_subset(dataset, tmp_path):
    res = train(TrainConfig(epochs=1, batch_size=4, seed=5, sources=("s2",)),
                dataset, tmp_path)
    assert res.source_names == ("s2",)
    ck = Checkpoint.load(res.last_checkpoint)
    assert ck.config["n_sources"] == 1


def test_unknown_source_rejected(dataset, tmp_path):
    with pytest.raises(ConfigError):
        train(TrainConfig(epochs=1, sources=("s9",)), dataset, tmp_path)


def test_resolution_mismatch_rejected(dataset, tmp_path):
    with pytest.raises(ConfigError):
        train(TrainConfig(epochs=1, resolution="64x64"), dataset, tmp_path)


def test_same_seed_checkpoints_byte_identical(dataset, tmp_path):
    cfg = TrainConfig(epochs=1, batch_size=4, seed=9)
    a = train(cfg, dataset, tmp_path / "a")
    b = train(cfg, dataset, tmp_path / "b")
    blob_a = a.last_checkpoint.read_bytes()
    blob_b = b.last_checkpoint.read_bytes()
    assert blob_a == blob_b


def test_different_seeds_differ(dataset, tmp_path):
    a = train(TrainConfig(epochs=1, batch_size=4, seed=1), dataset, tmp_path / "a")
    b = train(TrainConfig(epochs=1, batch_size=4, seed=2), dataset, tmp_path / "b")
    assert a.last_checkpoint.read_bytes() != b.last_checkpoint.read_bytes()


def test_reload_reproduces_prediction_bitwise(dataset, short_run):
    man = Manifest.load(dataset / "manifest.tsv")
    ds = SampleSet(man.base_dir, man.split("val"))
    frame = Tensor(ds.frame(0)[None])
    pipe1, _ = build_pipeline_from_checkpoint(
        Checkpoint.load(short_run.best_checkpoint))
    pipe2, _ = build_pipeline_from_checkpoint(
        Checkpoint.load(short_run.best_checkpoint))
    p1 = pipe1.apb.predict(frame).values
    p2 = pipe2.apb.predict(frame).values
    assert np.array_equal(p1, p2)
    assert p1.std() > 0  # trained model is no longer uniform


def test_keb_strategies_change_training(dataset, tmp_path):
    base = dict(epochs=1, batch_size=4, seed=5)
    runs = {
        s: train(TrainConfig(keb_strategy=s, **base), dataset, tmp_path / s)
        for s in ("single", "concat", "off")
    }
    blobs = {s: r.last_checkpoint.read_bytes() for s, r in runs.items()}
    assert blobs["single"] != blobs["off"]
    assert blobs["concat"] != blobs["off"]
    # concat feeds a two-channel label stack to the uncertainty branch
    ck = Checkpoint.load(runs["concat"].last_checkpoint)
    intake = ck.arrays["param/umb.stage0.src0.in1.weight"]
    assert intake.shape[1] == 2


# -- evaluation and inference -----------------------------------------------

def test_evaluate_reports_all_test_samples(dataset, short_run):
    res = evaluate(short_run.best_checkpoint, dataset, "test")
    man = Manifest.load(dataset / "manifest.tsv")
    assert len(res.rows) == len(man.split("test"))
    for sample_id, k, c in res.rows:
        assert k >= 0 and -1 <= c <= 1
    assert set(res.baselines) == {"s1", "s2"}
    text = res.report_text()
    assert text.count("\n") == len(res.rows)
    first = text.splitlines()[0].split("\t")
    assert first[0] == res.rows[0][0]
    assert float(first[1]) == res.rows[0][1]


def test_evaluate_uniform_checkpoint_matches_entropy_gap(dataset, tmp_path):
    """A fresh model predicts uniform, so KLD(G, S) = log(HW) - H(G)."""
    import math

    from attnmine.objective import entropy
    from attnmine.optim import AdamW
    from attnmine.train import Pipeline, _checkpoint_of

    cfg = TrainConfig()
    pipe = Pipeline(cfg, 32, 32, 2)
    ck = _checkpoint_of(pipe, AdamW(list(pipe.named_parameters())), cfg, 0)
    path = tmp_path / "fresh.atck"
    ck.save(path)
    res = evaluate(path, dataset, "test")
    man = Manifest.load(dataset / "manifest.tsv")
    ds = SampleSet(man.base_dir, man.split("test"))
    gaps = [math.log(32 * 32) - entropy(ds.ground_truth(i).values)
            for i in range(len(ds))]
    assert res.mean_kld == pytest.approx(np.mean(gaps), abs=1e-6)
    for _, _, c in res.rows:
        assert c == 0.0  # uniform prediction has zero variance -> scored 0


def test_evaluate_missing_split(dataset, short_run, tmp_path):
    # a manifest whose test rows lack ground truth
    lines = (dataset / "manifest.tsv").read_text().splitlines()
    doctored = []
    for line in lines:
        parts = line.split("\t")
        if parts[0] == "test":
            parts[4] = "-"
        doctored.append("\t".join(parts))
    alt = tmp_path / "alt"
    alt.mkdir()
    (alt / "manifest.tsv").write_text("\n".join(doctored) + "\n")
    for f in dataset.iterdir():
        if f.name != "manifest.tsv":
            (alt / f.name).symlink_to(f)
    with pytest.raises(DataError):
        evaluate(short_run.best_checkpoint, alt, "test")


def test_infer_writes_normalized_raster(dataset, short_run, tmp_path):
    man = Manifest.load(dataset / "manifest.tsv")
    frame_rel = man.split("test")[0].frame
    out = tmp_path / "pred.atnm"
    pred = infer(short_run.best_checkpoint, dataset / frame_rel, out)
    assert abs(pred.values.sum() - 1.0) < 1e-9
    loaded = load_map(out)
    assert np.array_equal(loaded.values, pred.values)
    assert loaded.normalized
    assert out.with_suffix(".pgm").is_file()


def test_infer_wrong_frame_size(short_run, tmp_path):
    from attnmine.maps import write_ppm

    bad = tmp_path / "bad.ppm"
    write_ppm(np.zeros((3, 16, 16)), bad)
    with pytest.raises(DataError):
        infer(short_run.best_checkpoint, bad, tmp_path / "x.atnm")


# -- command line -----------------------------------------------------------

def test_cli_full_cycle(tmp_path, capsys):
    data = tmp_path / "data"
    run = tmp_path / "run"
    assert cli.main(["gen-data", "--out", str(data), "--seed", "4",
                     "--samples", "12", "--size", "32x32"]) == 0
    cfg = tmp_path / "train.cfg"
    cfg.write_text("epochs = 1\nbatch_size = 4\nseed = 2\n")
    assert cli.main(["train", "--config", str(cfg), "--data", str(data),
                     "--out", str(run)]) == 0
    ckpt = run / "best.atck"
    assert ckpt.is_file()

    report = tmp_path / "report.tsv"
    assert cli.main(["eval", "--ckpt", str(ckpt), "--data", str(data),
                     "--split", "val", "--report", str(report)]) == 0
    assert "kld_mean" in report.read_text()

    man = Manifest.load(data / "manifest.tsv")
    frame = data / man.split("test")[0].frame
    out_map = tmp_path / "pred.atnm"
    assert cli.main(["infer", "--ckpt", str(ckpt), "--frame", str(frame),
                     "--out", str(out_map)]) == 0
    assert out_map.is_file()
    capsys.readouterr()


def test_cli_exit_codes(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("mystery = 1\n")
    assert cli.main(["train", "--config", str(cfg), "--data", str(tmp_path),
                     "--out", str(tmp_path / "o")]) == 2
    good = tmp_path / "good.cfg"
    good.write_text("epochs = 1\n")
    assert cli.main(["train", "--config", str(good),
                     "--data", str(tmp_path / "nowhere"),
                     "--out", str(tmp_path / "o")]) == 3
    assert cli.main(["eval", "--ckpt", str(tmp_path / "missing.atck"),
                     "--data", str(tmp_path)]) == 3
    capsys.readouterr()


def test_cli_selftest(capsys):
    assert cli.main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert out.count("ok:") == 5
