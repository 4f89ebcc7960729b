import json
import shutil

import numpy as np
import pytest
import torch

from conftest import tiny_config
from enhseg.core import ConfigError, DataError
from enhseg.models import build_model
from enhseg.train import Trainer, load_model, poly_lr, stream_ids, train_step


def test_poly_lr_examples():
    assert poly_lr(0, 1000, 1e-3) == 1e-3
    assert poly_lr(1000, 1000, 1e-3) == 0.0
    assert poly_lr(500, 1000, 1e-3) == pytest.approx(5.359e-4, abs=1e-7)
    for it in (-1, 1001):
        with pytest.raises(ConfigError):
            poly_lr(it, 1000, 1e-3)
    with pytest.raises(ConfigError):
        poly_lr(0, 0, 1e-3)


def test_poly_lr_is_non_increasing():
    lrs = [poly_lr(i, 50, 0.01) for i in range(51)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_stream_visits_every_id_once_per_pass():
    ids = [f"i{k}" for k in range(10)]
    seen = sum((stream_ids(ids, 0, 1, it, 5) for it in range(2)), [])
    assert sorted(seen) == sorted(ids)
    assert stream_ids(ids, 0, 1, 3, 5) == stream_ids(ids, 0, 1, 3, 5)


def _params(model):
    return [p.detach().clone() for p in model.parameters()]


def test_batch_contract(small_synthetic, tmp_path):
    tr = Trainer(tiny_config(small_synthetic, tmp_path), small_synthetic)
    lab, unl = tr.labeled_batch(0), tr.unlabeled_batch(0)
    assert lab["image"].shape == (2, 3, 32, 32) and lab["label"].shape == (2, 32, 32)
    for k in ("weak", "strong1", "strong2"):
        assert unl[k].shape == (2, 3, 32, 32) and unl[k].dtype == torch.float32
    for k in ("pseudo", "valid", "box1", "box2"):
        assert unl[k].shape == (2, 32, 32)
    assert (unl["perm1"] != torch.arange(2)).all()
    assert set(lab["ids"]) <= set(tr.labeled_ids) and set(unl["ids"]) <= set(tr.unlabeled_ids)


def test_zero_learning_rate_leaves_parameters_unchanged(small_synthetic, tmp_path):
    cfg = tiny_config(small_synthetic, tmp_path)
    cfg.optim.lr0 = 0.0
    tr = Trainer(cfg, small_synthetic)
    before = _params(tr.model)
    rec = tr.step()
    assert np.isfinite(rec["loss_total"])
    for a, b in zip(before, tr.model.parameters()):
        assert torch.equal(a, b)


def test_one_step_moves_parameters_and_combines_losses(small_synthetic, tmp_path):
    tr = Trainer(tiny_config(small_synthetic, tmp_path), small_synthetic)
    before = _params(tr.model)
    rec = tr.step()
    assert any(not torch.equal(a, b) for a, b in zip(before, tr.model.parameters()))
    assert rec["loss_total"] == pytest.approx((rec["loss_s"] + rec["loss_u"]) / 2, rel=1e-5)
    assert rec["frac_from_pseudo"] + rec["frac_from_model"] + rec["frac_ignore"] == pytest.approx(1.0)


def test_supervised_mode_has_no_unlabeled_term(small_synthetic, tmp_path):
    tr = Trainer(tiny_config(small_synthetic, tmp_path, mode="supervised"), small_synthetic)
    rec = tr.step()
    assert rec["loss_u"] == 0 and rec["loss_total"] == rec["loss_s"]


def test_lr_trace_follows_schedule(small_synthetic, tmp_path):
    cfg = tiny_config(small_synthetic, tmp_path, iters=6)
    res = Trainer(cfg, small_synthetic).run(validate=False)
    assert [r["lr"] for r in res["history"]] == [poly_lr(i, 6, 0.01) for i in range(6)]
    logged = [json.loads(ln) for ln in open(res["metrics"])]
    assert [r["iter"] for r in logged] == list(range(6))


def test_same_config_same_trajectory(small_synthetic, tmp_path):
    runs = [Trainer(tiny_config(small_synthetic, tmp_path / k, iters=3), small_synthetic).run(validate=False)
            for k in "ab"]
    assert runs[0]["history"] == runs[1]["history"]
    a, b = (torch.load(r["last_checkpoint"], weights_only=False)["model"] for r in runs)
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_resume_continues_same_trajectory(small_synthetic, tmp_path):
    full = Trainer(tiny_config(small_synthetic, tmp_path / "full", iters=4), small_synthetic).run(validate=False)
    cfg = tiny_config(small_synthetic, tmp_path / "part", iters=4, checkpoint_every=2)
    Trainer(cfg, small_synthetic).run(max_iters=2, validate=False)
    rest = Trainer(cfg, small_synthetic).run(resume=True, validate=False)
    assert [r["iter"] for r in rest["history"]] == [2, 3]
    assert rest["history"] == full["history"][2:]
    a = torch.load(full["last_checkpoint"], weights_only=False)["model"]
    b = torch.load(rest["last_checkpoint"], weights_only=False)["model"]
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert len(open(rest["metrics"]).read().splitlines()) == 4


def test_resume_without_checkpoint(small_synthetic, tmp_path):
    with pytest.raises(DataError):
        Trainer(tiny_config(small_synthetic, tmp_path), small_synthetic).run(resume=True)


def test_missing_pseudo_label_names_the_sample(small_synthetic, tmp_path):
    pseudo = tmp_path / "pseudo"
    shutil.copytree(small_synthetic.root + "/pseudo", pseudo)
    cfg = tiny_config(small_synthetic, tmp_path / "run")
    victim = Trainer(tiny_config(small_synthetic, tmp_path / "probe", mode="supervised"),
                     small_synthetic).unlabeled_ids[0]
    (pseudo / f"{victim}.png").unlink()
    cfg.data.pseudo_dir = str(pseudo)
    with pytest.raises(DataError, match=victim):
        Trainer(cfg, small_synthetic)


def test_forward_is_decode_of_encode():
    torch.manual_seed(0)
    m = build_model("tiny", 3, 8).eval()
    x = torch.randn(2, 3, 33, 29)
    np.testing.assert_allclose(m(x).detach().numpy(), m.decode(m.encode(x), x.shape[-2:]).detach().numpy(),
                               atol=1e-5)
    assert m(x).shape == (2, 3, 33, 29)


def test_run_writes_checkpoints_and_load_model(small_synthetic, tmp_path):
    cfg = tiny_config(small_synthetic, tmp_path, iters=2)
    tr = Trainer(cfg, small_synthetic)
    res = tr.run()
    assert 0 <= res["best_miou"] <= 1 and res["best_checkpoint"]
    model, ck = load_model(res["last_checkpoint"])
    img = np.random.default_rng(0).random((32, 32, 3)).astype(np.float32)
    with torch.no_grad():
        pred = model(torch.from_numpy(img).permute(2, 0, 1)[None]).argmax(1)[0].numpy()
    np.testing.assert_array_equal(pred, tr.predict(img))
    assert ck["state"]["iteration"] == 2
    with pytest.raises(DataError):
        load_model(tmp_path / "nope.pt")


def test_train_step_directly_on_handmade_batch():
    torch.manual_seed(0)
    from enhseg.config import TrainConfig
    from enhseg.train import TrainState, make_optimizer

    cfg = TrainConfig()
    cfg.train.max_iters = 10
    model = build_model("tiny", 2, 4)
    opt = make_optimizer(model, cfg)
    lab = {"image": torch.rand(2, 3, 16, 16), "label": torch.randint(0, 2, (2, 16, 16))}
    rec = train_step(lab, None, model, opt, TrainState(3), cfg, 2, 255)
    assert rec["lr"] == poly_lr(3, 10, cfg.optim.lr0) and rec["iter"] == 3
