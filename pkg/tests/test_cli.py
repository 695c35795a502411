import json
import math

import numpy as np
import pytest
import yaml

from tafenet import checkpoint, cli
from tafenet import evaluate as ev
from tafenet.config import ConfigError, load_config
from tafenet.data import load_features, load_split, load_tasks
from tafenet.train import TrainingAborted, load_net, train

TINY = ["--set", "model.widths=[16,16]", "--set", "model.embed_hidden=16", "--set", "optim.epochs=2",
        "--set", "data.synthetic.samples_per_class=10"]


def run(*argv):
    return cli.main(list(argv))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run("train", "--seed", "0", "--out", str(out), *TINY) == 0
    return out


def test_train_outputs(trained):
    rows = [json.loads(line) for line in (trained / "train_log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in rows] == [1, 2]
    assert set(rows[0]) == {"epoch", "iteration", "l_cls", "l_emb", "total", "val_total", "lr"}
    for name in ("best.ckpt", "final.ckpt", "config.yaml"):
        assert (trained / name).exists()
    assert yaml.safe_load((trained / "config.yaml").read_text())["seed"] == 0


def test_one_epoch_initial_loss_near_ln_t(tmp_path):
    cfg = load_config(seed=0, out=str(tmp_path), overrides=["optim.epochs=1", "optim.batch_size=16",
                                                            "optim.lr={prediction: 1.0e-12, generators: 1.0e-12, "
                                                            "task_embedding: 1.0e-12}"])
    res = train(cfg)
    assert len(res.records) == 1
    # with updates frozen the epoch mean is the initial loss; batches hold up to 16 distinct classes
    assert 0.9 * math.log(2) < res.records[0]["l_cls"] < 1.1 * math.log(16)


def test_eval_writes_reports(trained, tmp_path, capsys):
    code = run("eval", "--seed", "0", "--out", str(tmp_path), "--checkpoint", str(trained / "final.ckpt"),
               "--protocol", "zsl", "--protocol", "gzsl", "--protocol", "shuffle", *TINY)
    assert code == 0
    g = ev.EvalReport.read(tmp_path / "eval_gzsl.json")
    assert g.metrics["H"] == pytest.approx(ev.harmonic_mean(g.metrics["acc_u"], g.metrics["acc_s"]))
    assert (tmp_path / "eval_zsl.json").exists() and (tmp_path / "eval_shuffle.json").exists()
    assert "protocol: gzsl" in capsys.readouterr().out


def test_eval_rejects_architecture_mismatch(trained, tmp_path, capsys):
    code = run("eval", "--seed", "0", "--out", str(tmp_path), "--checkpoint", str(trained / "final.ckpt"),
               *TINY, "--set", "model.widths=[8,8]")
    assert code == 1
    err = capsys.readouterr().err
    assert "checkpoint:" in err and "config:" in err


def test_fewshot_needs_exemplar_model(trained, tmp_path, capsys):
    code = run("eval", "--seed", "0", "--out", str(tmp_path), "--checkpoint", str(trained / "final.ckpt"),
               "--protocol", "fewshot", *TINY)
    assert code == 2 and not (tmp_path / "eval_fewshot.json").exists()


def test_embed(trained, tmp_path, capsys):
    code = run("embed", "--seed", "0", "--out", str(tmp_path), "--checkpoint", str(trained / "final.ckpt"),
               "--tasks", "20,21", "--max-samples", "2", *TINY)
    assert code == 0
    tafes, embs = ev.read_dump(tmp_path / "embeddings.tsv")
    assert len(tafes) == 4 and len(embs) == 2
    cfg = load_config(seed=0, overrides=[a for a in TINY if a != "--set"])
    net = load_net(trained / "final.ckpt")
    from tafenet.train import load_dataset

    ds = load_dataset(cfg)
    rows = [ds.store.sample_ids.index(r["sample_id"]) for r in tafes[:2]]
    tafe = net.compute_tafe(ds.store.features[rows].astype(np.float32), ds.tasks.vectors_for([20])[0]).data
    assert np.array_equal(np.array([r["vector"] for r in tafes[:2]]), tafe)
    code = run("embed", "--seed", "0", "--out", str(tmp_path), "--checkpoint", str(trained / "final.ckpt"),
               "--tasks", "20,99", *TINY)
    assert code == 2 and "99" in capsys.readouterr().err


def test_gen_synth(tmp_path):
    assert run("gen-synth", "--seed", "4", "--out", str(tmp_path / "a")) == 0
    assert run("gen-synth", "--seed", "4", "--out", str(tmp_path / "b")) == 0
    for name in ("features.tfeat", "tasks.json", "split.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    split = load_split(tmp_path / "a" / "split.json")
    load_tasks(tmp_path / "a" / "tasks.json", split=split)
    assert load_features(tmp_path / "a" / "features.tfeat").n == 1500
    assert run("gen-synth", "--seed", "4", "--out", str(tmp_path / "c"), "--set", "data.synthetic.noise=0") == 0
    s = load_features(tmp_path / "c" / "features.tfeat")
    for c in range(30):
        assert np.all(np.ptp(s.features[s.labels == c], axis=0) == 0)  # identical rows: variance exactly 0


def test_train_from_files(tmp_path):
    assert run("gen-synth", "--seed", "1", "--out", str(tmp_path / "d"), "--set", "data.synthetic.samples_per_class=8") == 0
    cfg = {"seed": 1, "data": {"features": str(tmp_path / "d/features.tfeat"), "tasks": str(tmp_path / "d/tasks.json"),
                               "split": str(tmp_path / "d/split.json")},
           "model": {"widths": [8, 8], "embed_hidden": 8}, "optim": {"epochs": 1}}
    (tmp_path / "c.yaml").write_text(yaml.safe_dump(cfg))
    assert run("train", "--config", str(tmp_path / "c.yaml"), "--out", str(tmp_path / "r")) == 0


@pytest.mark.parametrize("argv,field", [
    (["train"], "seed"),
    (["train", "--seed", "1", "--set", "loss.beta=-1"], "loss.beta"),
    (["train", "--seed", "1", "--set", "optim.kind=rmsprop"], "optim.kind"),
    (["train", "--seed", "1", "--set", "model.depth=2"], "model.depth"),
    (["train", "--seed", "1", "--set", "data.features=/nonexistent.tfeat"], "data"),
    (["train", "--seed", "1", "--threads", "0"], "threads"),
])
def test_invalid_config_exits_before_compute(tmp_path, capsys, argv, field):
    out = tmp_path / "never"
    assert run(*argv, "--out", str(out)) == 2
    assert field in capsys.readouterr().err
    assert not out.exists()


def test_flags_override_file(tmp_path):
    (tmp_path / "c.yaml").write_text(yaml.safe_dump({"seed": 3, "threads": 2, "loss": {"beta": 0.5}}))
    cfg = load_config(tmp_path / "c.yaml", ["loss.beta=0"], seed=9)
    assert (cfg.seed, cfg.threads, cfg.loss.beta) == (9, 2, 0)
    with pytest.raises(ConfigError, match="nonsense"):
        load_config(seed=1, overrides=["nonsense=1"])


def test_non_finite_loss_aborts_with_last_good(tmp_path):
    cfg = load_config(seed=0, out=str(tmp_path), overrides=[a for a in TINY if a != "--set"] + [
        "optim.lr={prediction: 1.0e+30, generators: 1.0e+30, task_embedding: 1.0e+30}", "optim.kind=sgd-momentum"])
    with pytest.raises(TrainingAborted):
        train(cfg)
    arrays, _ = checkpoint.load(tmp_path / "last_good.ckpt")
    assert all(np.isfinite(a).all() for a in arrays.values())


def test_iteration_mode_and_class_sampling(tmp_path):
    cfg = load_config(seed=0, out=str(tmp_path), overrides=[a for a in TINY if a != "--set"] + [
        "optim.unit=iteration", "optim.iterations=7", "optim.milestones=[3]", "optim.classes_per_step=4"])
    res = train(cfg)
    assert res.records[-1]["iteration"] == 7
    assert res.state.milestones_passed == 1


def test_train_with_protocol_evaluates_best(tmp_path, capsys):
    assert run("train", "--seed", "0", "--out", str(tmp_path), "--protocol", "zsl", *TINY) == 0
    report = ev.EvalReport.read(tmp_path / "eval_zsl.json")
    assert 0 <= report.metrics["top1_per_class"] <= 1
    assert "protocol: zsl" in capsys.readouterr().out
    assert run("train", "--seed", "0", "--out", str(tmp_path / "plain"), *TINY) == 0
    assert not list((tmp_path / "plain").glob("eval_*.json"))
