import csv
import json

import numpy as np
import pytest

from keyfort.cli import main, number
from keyfort.data_io import Dataset, channel_stats, import_ppm, open_dataset, save_dataset
from keyfort.keyed_transform import Key, generate_key, identity_key
from keyfort.model import VisionTransformer, load_checkpoint, save_checkpoint

from conftest import TINY, synthetic

ARCH = ["--vit-patch", "2", "--embed-dim", "16", "--heads", "2", "--blocks", "2", "--mlp-ratio", "2"]
FAST = ["--batch-size", "32", "--lr", "3e-3", "--no-hflip"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    tr = synthetic(256, 0)
    te = synthetic(1000, 1, "test")
    tr.mean, tr.std = channel_stats(tr.images)
    save_dataset(tr, d)
    save_dataset(te, d)
    return d


@pytest.fixture(scope="module")
def trained(tmp_path_factory, data_dir):
    d = tmp_path_factory.mktemp("models")
    assert main(["pretrain", "--data", str(data_dir), "--out", str(d / "m0.ckpt"), "--epochs", "4", "--val-subset", "0",
                 *ARCH, *FAST]) == 0
    assert main(["keygen", "--seed", "1", "--block-size", "2", "--channels", "3", "--out", str(d / "k1.json")]) == 0
    assert main(["finetune", "--base", str(d / "m0.ckpt"), "--key", str(d / "k1.json"), "--data", str(data_dir),
                 "--out", str(d / "mk.ckpt"), "--epochs", "3", "--val-subset", "0", *FAST]) == 0
    return d


def test_number_accepts_fractions():
    assert number("4/255") == 4 / 255
    assert number("0.5") == 0.5


def test_keygen(tmp_path, capsys):
    out = tmp_path / "k.json"
    assert main(["keygen", "--seed", "7", "--block-size", "4", "--channels", "3", "--out", str(out)]) == 0
    assert "perm_length=48" in capsys.readouterr().out
    first = out.read_bytes()
    assert Key.load(out) == generate_key(7, 4, 3)
    # existing file without --force is a validation error
    assert main(["keygen", "--seed", "7", "--block-size", "4", "--channels", "3", "--out", str(out)]) == 1
    assert main(["keygen", "--seed", "7", "--block-size", "4", "--channels", "3", "--out", str(out), "--force"]) == 0
    assert out.read_bytes() == first
    manifest = json.loads((tmp_path / "k.json.manifest.json").read_text())
    assert manifest["command"] == "keygen" and manifest["seeds"] == {"key": 7}


def test_keygen_usage_errors(tmp_path):
    assert main(["keygen", "--seed", "7", "--block-size", "0", "--channels", "3", "--out", str(tmp_path / "k")]) == 1
    assert main(["keygen", "--seed", "x", "--block-size", "2", "--out", str(tmp_path / "k")]) == 1
    assert main(["nope"]) == 1
    assert not (tmp_path / "k").exists()


def test_transform_identity_and_inverse(tmp_path, data_dir):
    identity_key(2, 3).save(tmp_path / "id.json")
    generate_key(5, 2, 3).save(tmp_path / "k.json")
    assert main(["transform", "--key", str(tmp_path / "id.json"), "--in", str(data_dir), "--out", str(tmp_path / "same")]) == 0
    orig = open_dataset(data_dir, "test")
    assert open_dataset(tmp_path / "same", "test").images.tobytes() == orig.images.tobytes()

    assert main(["transform", "--key", str(tmp_path / "k.json"), "--in", str(data_dir), "--out", str(tmp_path / "enc"),
                 "--export-ppm", "2"]) == 0
    assert main(["transform", "--key", str(tmp_path / "k.json"), "--in", str(tmp_path / "enc"), "--out",
                 str(tmp_path / "dec"), "--inverse"]) == 0
    assert open_dataset(tmp_path / "dec", "train").images.tobytes() == open_dataset(data_dir, "train").images.tobytes()
    assert (tmp_path / "enc" / "manifest.json").exists()

    prev = tmp_path / "enc" / "previews"
    plain, keyed = prev / "train_00000_plain.ppm", prev / "train_00000_keyed.ppm"
    assert plain.read_bytes() != keyed.read_bytes()
    assert import_ppm(keyed).shape == (3, 8, 8)


def test_transform_divisibility_error(tmp_path, data_dir, capsys):
    generate_key(0, 3, 3).save(tmp_path / "k3.json")
    code = main(["transform", "--key", str(tmp_path / "k3.json"), "--in", str(data_dir), "--out", str(tmp_path / "o")])
    assert code == 1
    assert "8x8" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_eval_clean_random_model_is_chance(tmp_path):
    # noise images with balanced labels independent of the pixels
    rng = np.random.default_rng(11)
    n = 4000
    d = tmp_path / "noise"
    tr = Dataset("train", rng.random((64, 3, 8, 8), dtype=np.float32), np.arange(64) % 4, 4)
    tr.mean, tr.std = channel_stats(tr.images)
    save_dataset(tr, d)
    save_dataset(Dataset("test", rng.random((n, 3, 8, 8), dtype=np.float32), rng.permutation(np.arange(n) % 4), 4), d)
    m = VisionTransformer(TINY, seed=3)
    save_checkpoint(m, tmp_path / "rand.ckpt")
    assert main(["eval", "--models", f"rand={tmp_path / 'rand.ckpt'}", "--scenario", "clean", "--data", str(d),
                 "--out", str(tmp_path / "ev")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "ev.csv")))
    assert len(rows) == 1
    assert abs(float(rows[0]["accuracy"]) - 0.25) <= 0.03
    assert (tmp_path / "ev.json").exists() and (tmp_path / "ev.csv.manifest.json").exists()


def test_config_file_and_flag_override(tmp_path, data_dir):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"epochs": 5, "lr": 1e-3, "batch_size": 64}}))
    out = tmp_path / "m.ckpt"
    assert main(["pretrain", "--data", str(data_dir), "--out", str(out), "--config", str(cfg), "--epochs", "1",
                 "--val-subset", "0", *ARCH]) == 0
    man = json.loads((tmp_path / "m.ckpt.manifest.json").read_text())
    assert man["resolved_config"]["train"]["epochs"] == 1
    assert man["resolved_config"]["train"]["lr"] == 1e-3
    assert man["resolved_config"]["train"]["batch_size"] == 64
    assert set(man["inputs"]) >= {str(data_dir / "train-images.idx")}


def test_config_errors_enumerate_fields(tmp_path, data_dir, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"train": {"epochs": -1, "lr": 0, "label_smoothing": 2}}))
    assert main(["pretrain", "--data", str(data_dir), "--out", str(tmp_path / "m.ckpt"), "--config", str(cfg)]) == 1
    err = capsys.readouterr().err
    for field in ("epochs", "lr", "label_smoothing"):
        assert field in err


def test_runtime_failure_leaves_no_outputs(tmp_path, data_dir, capsys):
    m = VisionTransformer(TINY)
    m.head.params["bias"][:] = np.nan
    save_checkpoint(m, tmp_path / "nan.ckpt")
    generate_key(1, 2, 3).save(tmp_path / "k.json")
    out = tmp_path / "bad.ckpt"
    code = main(["finetune", "--base", str(tmp_path / "nan.ckpt"), "--key", str(tmp_path / "k.json"),
                 "--data", str(data_dir), "--out", str(out), "--epochs", "1"])
    assert code == 2
    assert "runtime failure" in capsys.readouterr().err
    assert sorted(p.name for p in tmp_path.iterdir()) == ["k.json", "nan.ckpt"]


def test_missing_inputs_are_validation_errors(tmp_path, data_dir):
    assert main(["finetune", "--base", str(tmp_path / "none.ckpt"), "--key", str(tmp_path / "k.json"),
                 "--data", str(data_dir), "--out", str(tmp_path / "o.ckpt")]) == 1
    assert main(["eval", "--models", "x", "--data", str(tmp_path / "nodata"), "--out", str(tmp_path / "e")]) == 1


def test_attack_command(tmp_path, trained, data_dir, capsys):
    code = main(["attack", "--source", str(trained / "m0.ckpt"), "--eval", f"keyed={trained / 'mk.ckpt'}",
                 "--data", str(data_dir), "--subset", "64", "--epsilon", "8/255", "--steps", "3",
                 "--out", str(tmp_path / "adv.bin")])
    assert code == 0
    out = capsys.readouterr().out
    assert "source success rate" in out and "keyed: accuracy" in out
    man = json.loads((tmp_path / "adv.bin.manifest.json").read_text())
    assert man["resolved_config"]["attack"]["epsilon"] == 8 / 255


def test_matrix_keys_three(tmp_path, trained, data_dir):
    out = tmp_path / "tm.csv"
    code = main(["matrix", "--keys", "3", "--base", str(trained / "m0.ckpt"), "--block-size", "2",
                 "--data", str(data_dir), "--subset", "64", "--train-subset", "128", "--epochs", "1",
                 "--epsilon", "0.1", "--steps", "3", "--out", str(out), *FAST])
    assert code == 0
    rows = list(csv.reader(open(out)))
    assert len(rows) == 4 and all(len(r) == 4 for r in rows)
    assert rows[0] == ["source\\target", "key1", "key2", "key3"]
    for r in rows[1:]:
        assert all(0 <= float(v) <= 1 for v in r[1:])


def test_full_pipeline_and_replay(tmp_path, trained, data_dir):
    m0, mk = trained / "m0.ckpt", trained / "mk.ckpt"
    d = tmp_path
    common = ["--data", str(data_dir), "--subset", "48", "--steps", "2"]
    assert main(["proliferate", "--base", str(m0), "--seeds", "2,3", "--block-size", "2", "--data", str(data_dir),
                 "--out", str(d / "prol"), "--epochs", "1", "--subset", "64", "--val-subset", "0", *FAST]) == 0
    assert sorted(p.name for p in (d / "prol").iterdir()) == [
        "key2.ckpt", "key2.key.json", "key2.report.json", "key3.ckpt", "key3.key.json", "key3.report.json",
        "manifest.json", "reports.csv"]
    assert main(["eval", "--models", f"plain={m0},k1={mk},k2={d / 'prol' / 'key2.ckpt'}", "--pretrained", str(m0),
                 "--scenario", "clean,non_adaptive,whitebox", "--norm", "inf,2", "--out", str(d / "grid"), *common]) == 0
    rows = list(csv.DictReader(open(d / "grid.csv")))
    assert len(rows) == 3 * (1 + 2 + 2)
    assert main(["eval", "--models", f"k1={mk}", "--pretrained", str(m0), "--scenario", "adaptive",
                 "--guessed-seed", "9", "--train-subset", "64", "--epochs", "1", "--out", str(d / "adapt"), *common]) == 0
    assert main(["sweep", "--models", f"k1={mk}", "--epsilons", "0,1/255,4/255", "--out", str(d / "sw"), *common]) == 0
    assert (d / "sw_tsv" / "sw_k1.tsv").read_text().count("\n") == 4
    assert main(["matrix", "--models", f"a={mk},b={d / 'prol' / 'key2.ckpt'}", "--out", str(d / "m.csv"), *common]) == 0

    # replay from manifests: outputs are byte-identical
    for out, man in [(d / "grid.csv", d / "grid.csv.manifest.json"),
                     (d / "prol" / "key2.ckpt", d / "prol" / "manifest.json"),
                     (d / "sw.csv", d / "sw.csv.manifest.json")]:
        before = out.read_bytes()
        assert main(["replay", str(man)]) == 0
        assert out.read_bytes() == before, out
    rep = json.loads((d / "prol" / "key2.report.json").read_text())
    assert rep["wall_clock_s"] is None


def test_pretrain_replay_byte_identical(tmp_path, data_dir):
    out = tmp_path / "m.ckpt"
    assert main(["pretrain", "--data", str(data_dir), "--out", str(out), "--epochs", "1", "--val-subset", "0",
                 "--seed", "4", *ARCH, *FAST]) == 0
    first = {p: p.read_bytes() for p in (out, tmp_path / "m.report.json")}
    assert main(["replay", str(tmp_path / "m.ckpt.manifest.json")]) == 0
    for p, b in first.items():
        assert p.read_bytes() == b, p
    assert load_checkpoint(out).config == TINY


def test_threads_env(tmp_path, monkeypatch):
    monkeypatch.setenv("KEYFORT_THREADS", "2")
    assert main(["keygen", "--seed", "1", "--block-size", "2", "--out", str(tmp_path / "k.json")]) == 0
    man = json.loads((tmp_path / "k.json.manifest.json").read_text())
    assert man["resolved_config"]["threads"] == 2
