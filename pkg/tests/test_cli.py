import json

import numpy as np
import pytest

from mlsp.cli import main, parse_args, read_config
from mlsp.store import FeatureStore

N = 50


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    assert main(["synth-corpus", "--out", str(d), "--n", str(N), "--seed", "4"]) == 0
    assert main(["extract", "--manifest", str(d / "manifest.csv"), "--kind", "narrow",
                 "--aug", "8", "--store", str(d / "narrow8.mlsp")]) == 0
    assert main(["extract", "--manifest", str(d / "manifest.csv"), "--kind", "wide",
                 "--aug", "1", "--store", str(d / "wide1.mlsp")]) == 0
    return d


def train_args(d, ckpt, *extra):
    return ["train", "--store", str(d / "narrow8.mlsp"), "--labels", str(d / "labels.csv"),
            "--arch", "single_3fc", "--x", "256", "--max-epochs", "3", "--batch-size", "16",
            "--checkpoint", str(ckpt), "--deterministic", *extra]


@pytest.fixture(scope="module")
def trained(corpus):
    ckpt = corpus / "head.ckpt"
    assert main(train_args(corpus, ckpt)) == 0
    return ckpt


def test_extract_counts(corpus):
    with FeatureStore(str(corpus / "narrow8.mlsp")) as st:
        assert st.header.count == N and st.augs == 8
        assert st.header.count * st.augs == 400
        assert st.feature_shape == (10048,)
    with FeatureStore(str(corpus / "wide1.mlsp")) as st:
        assert st.header.record_values == 25 * 10048
        assert st.feature_shape == (5, 5, 10048)


def test_parallel_extraction_identical(corpus, tmp_path):
    out = tmp_path / "p.mlsp"
    assert main(["extract", "--manifest", str(corpus / "manifest.csv"), "--aug", "1",
                 "--store", str(out), "--workers", "2"]) == 0
    ref = tmp_path / "s.mlsp"
    assert main(["extract", "--manifest", str(corpus / "manifest.csv"), "--aug", "1",
                 "--store", str(ref)]) == 0
    assert out.read_bytes() == ref.read_bytes()


def test_extract_skips_bad_images(corpus, tmp_path):
    manifest = tmp_path / "m.csv"
    lines = (corpus / "manifest.csv").read_text().splitlines()[:4]
    lines.append("999,missing.ppm")
    manifest.write_text("\n".join(lines) + "\n")
    out, fails = tmp_path / "s.mlsp", tmp_path / "fail.csv"
    assert main(["extract", "--manifest", str(manifest), "--root", str(corpus), "--aug", "1",
                 "--store", str(out), "--failures", str(fails)]) == 0
    assert FeatureStore(str(out)).header.count == 3
    assert fails.read_text().splitlines()[1].startswith("999,")
    manifest.write_text("image_id,filename\n1,missing.ppm\n")
    assert main(["extract", "--manifest", str(manifest), "--aug", "1",
                 "--store", str(tmp_path / "e.mlsp")]) == 2
    assert not (tmp_path / "e.mlsp").exists()


def test_train_writes_outputs(corpus, trained):
    assert trained.exists()
    hist = (corpus / "head.ckpt.history.csv").read_text().splitlines()
    assert hist[0] == "epoch,train_loss,val_loss,lr" and len(hist) == 4
    meta = json.loads((corpus / "head.ckpt.meta.json").read_text())
    assert meta["head"]["architecture"] == "single_3fc" and meta["feature_kind"] == "narrow"
    assert len(meta["store_sha256"]) == 64 and meta["seed"] == 0


def test_train_deterministic(corpus, trained, tmp_path):
    again = tmp_path / "again.ckpt"
    assert main(train_args(corpus, again)) == 0
    assert again.read_bytes() == trained.read_bytes()
    assert ((tmp_path / "again.ckpt.history.csv").read_bytes()
            == (corpus / "head.ckpt.history.csv").read_bytes())


def test_evaluate_report_files(corpus, trained, tmp_path, capsys):
    prefix = tmp_path / "rep"
    assert main(["evaluate", "--store", str(corpus / "narrow8.mlsp"), "--labels",
                 str(corpus / "labels.csv"), "--checkpoint", str(trained), "--sweep",
                 "--report", str(prefix)]) == 0
    assert "majority baseline" in capsys.readouterr().out
    assert (tmp_path / "rep.txt").exists()
    assert len((tmp_path / "rep.images.csv").read_text().splitlines()) == N + 1
    assert (tmp_path / "rep.sweep.csv").read_text().startswith("threshold,accuracy,baseline")
    assert (tmp_path / "rep.summary.csv").read_text().startswith("n,srcc,plcc")


def test_evaluate_missing_labels_exit_2(corpus, trained, tmp_path):
    labels = (corpus / "labels.csv").read_text().splitlines()
    (tmp_path / "l.csv").write_text("\n".join(labels[:-3]) + "\n")
    assert main(["evaluate", "--store", str(corpus / "narrow8.mlsp"), "--labels",
                 str(tmp_path / "l.csv"), "--checkpoint", str(trained)]) == 2


def test_predict_store_order_invariant(corpus, trained, tmp_path):
    ids = list(range(1, N + 1))
    rng = np.random.default_rng(0)
    for name, order in (("a", ids), ("b", list(rng.permutation(ids)))):
        (tmp_path / f"{name}.ids").write_text("\n".join(map(str, order)) + "\n")
        assert main(["predict", "--store", str(corpus / "narrow8.mlsp"), "--checkpoint",
                     str(trained), "--ids", str(tmp_path / f"{name}.ids"),
                     "--out", str(tmp_path / f"{name}.csv")]) == 0
    rows = {}
    for name in "ab":
        lines = (tmp_path / f"{name}.csv").read_text().splitlines()
        assert lines[0] == "image_id,prediction"
        rows[name] = dict(line.split(",") for line in lines[1:])
    assert rows["a"] == rows["b"] and len(rows["a"]) == N


def test_predict_image(corpus, trained, tmp_path):
    outs = []
    for k in range(2):
        out = tmp_path / f"img{k}.csv"
        assert main(["predict", "--image", str(corpus / "img_000001.ppm"), "--checkpoint",
                     str(trained), "--out", str(out)]) == 0
        outs.append(out.read_text())
    assert outs[0] == outs[1]
    header, row = outs[0].splitlines()
    assert header == "image,prediction" and np.isfinite(float(row.split(",")[1]))
    # the image path agrees with the store path for the same image
    (tmp_path / "one.ids").write_text("1\n")
    assert main(["predict", "--store", str(corpus / "narrow8.mlsp"), "--checkpoint",
                 str(trained), "--ids", str(tmp_path / "one.ids"),
                 "--out", str(tmp_path / "s.csv")]) == 0
    from_store = float((tmp_path / "s.csv").read_text().splitlines()[1].split(",")[1])
    assert float(row.split(",")[1]) == pytest.approx(from_store, abs=0.05)


def test_inspect(corpus, tmp_path, capsys):
    assert main(["inspect", "--store", str(corpus / "narrow8.mlsp")]) == 0
    out = capsys.readouterr().out
    assert "defects    0" in out
    line = next(ln for ln in out.splitlines() if ln.startswith("values"))
    lo, hi = float(line.split()[2]), float(line.split()[4])
    assert lo <= hi
    data = bytearray((corpus / "narrow8.mlsp").read_bytes())
    index_offset, _ = FeatureStore(str(corpus / "narrow8.mlsp")).header.layout()
    data[index_offset + 2 * 16 + 9] ^= 0x10
    bad = tmp_path / "bad.mlsp"
    bad.write_bytes(bytes(data))
    assert main(["inspect", "--store", str(bad)]) == 2
    assert f"@{index_offset + 2 * 16 + 8}: offset" in capsys.readouterr().out


def test_pool_head_on_narrow_store_rejected(corpus, tmp_path, capsys):
    rc = main(["train", "--store", str(corpus / "narrow8.mlsp"), "--labels",
               str(corpus / "labels.csv"), "--arch", "pool_3fc", "--checkpoint",
               str(tmp_path / "p.ckpt")])
    assert rc == 2
    assert "needs wide features" in capsys.readouterr().err
    assert not (tmp_path / "p.ckpt").exists()


def test_pool_head_trains_on_wide_store(corpus, tmp_path):
    assert main(["train", "--store", str(corpus / "wide1.mlsp"), "--labels",
                 str(corpus / "labels.csv"), "--arch", "pool_3fc", "--kernels", "4",
                 "--max-epochs", "2", "--checkpoint", str(tmp_path / "p.ckpt")]) == 0
    assert main(["evaluate", "--store", str(corpus / "wide1.mlsp"), "--labels",
                 str(corpus / "labels.csv"), "--checkpoint", str(tmp_path / "p.ckpt")]) == 0


def test_block_subset(corpus, tmp_path):
    ckpt = tmp_path / "s5.ckpt"
    assert main(["train", "--store", str(corpus / "narrow8.mlsp"), "--labels",
                 str(corpus / "labels.csv"), "--arch", "single_1fc", "--blocks", "last:5",
                 "--max-epochs", "1", "--checkpoint", str(ckpt)]) == 0
    meta = json.loads((tmp_path / "s5.ckpt.meta.json").read_text())
    assert meta["head"]["blocks"] == 5
    assert main(["train", "--store", str(corpus / "narrow8.mlsp"), "--labels",
                 str(corpus / "labels.csv"), "--blocks", "last:12",
                 "--checkpoint", str(ckpt)]) == 1


def test_numeric_failure_exit_3(corpus, tmp_path):
    assert main(train_args(corpus, tmp_path / "n.ckpt", "--lr", "1e30", "--min-lr", "1e28",
                           "--init-output-bias", "false")) == 3


def test_usage_errors():
    assert main([]) == 1
    assert main(["train"]) == 1
    assert main(["train", "--store", "s", "--labels", "l", "--checkpoint", "c",
                 "--arch", "resolution_baseline"]) == 1
    assert main(["frobnicate"]) == 1


def test_missing_inputs_exit_2(tmp_path):
    assert main(["inspect", "--store", str(tmp_path / "nope.mlsp")]) == 2
    assert main(["train", "--store", str(tmp_path / "nope"), "--labels", "x",
                 "--checkpoint", str(tmp_path / "c")]) == 2


def test_config_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# pinned run\nstore = a.mlsp\nlabels = l.csv\ncheckpoint = c.ckpt\n"
                   "lr = 0.001\nmax-epochs = 7\narch = single_1fc\n")
    args = parse_args(["train", "--config", str(cfg), "--lr", "0.01"])
    assert args.lr == 0.01            # flag beats file
    assert args.max_epochs == 7       # file beats default
    assert args.batch_size == 128     # default
    assert args.arch == "single_1fc" and args.store == "a.mlsp"
    assert read_config(cfg)["max_epochs"] == "7"
    cfg.write_text("bogus = 1\n")
    assert main(["train", "--config", str(cfg)]) == 1
    cfg.write_text("arch = dual\n")
    assert main(["train", "--config", str(cfg)]) == 1
