import numpy as np
import pytest
import torch

from tstnet.config import ABLATIONS, PRESETS
from tstnet.data import SynthConfig, generate_synthetic, load_dataset
from tstnet.gradcheck import random_batch
from tstnet.model import TSTNet
from tstnet.train import (Checkpoint, TrainingDiverged, evaluate_model, measure_throughput,
                          predict_dataset, read_predictions, train, write_predictions)

CFG = PRESETS["synthetic"].replace(D=8, k=2, budget=16, epochs=3, batch=4)


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("train")
    generate_synthetic(SynthConfig(episodes=8), root / "tr")
    generate_synthetic(SynthConfig(episodes=4, first_index=8), root / "te")
    return load_dataset(root / "tr", CFG), load_dataset(root / "te", CFG)


def same_params(a: dict, b: dict) -> bool:
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


def test_smoke_and_log(data, tmp_path):
    tr, te = data
    res = train(CFG, tr, val=te, log_path=tmp_path / "log.jsonl")
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert len(lines) == 3 == len(res.history)
    assert {"epoch", "loss", "val_loss", "r1_05", "miou"} <= set(res.history[-1])
    assert res.checkpoint.epoch == 3
    assert all(np.isfinite(h["loss"]) for h in res.history)


def test_fixed_seed_bit_reproducible(data):
    tr, _ = data
    a = train(CFG, tr, eval_every=0)
    b = train(CFG, tr, eval_every=0)
    assert same_params(a.checkpoint.params, b.checkpoint.params)
    assert a.history == b.history
    c = train(CFG.replace(seed=1), tr, eval_every=0)
    assert not same_params(a.checkpoint.params, c.checkpoint.params)


def test_checkpoint_resume_continues_identically(data, tmp_path):
    tr, _ = data
    cfg = CFG.replace(epochs=4)
    straight = train(cfg, tr, eval_every=0)
    first = train(cfg, tr, epochs=1, eval_every=0)
    first.checkpoint.save(tmp_path / "ck.pt")
    resumed = train(cfg, tr, resume=Checkpoint.load(tmp_path / "ck.pt"), eval_every=0)
    assert resumed.checkpoint.epoch == 4
    assert same_params(straight.checkpoint.params, resumed.checkpoint.params)
    assert straight.history == resumed.history
    assert straight.checkpoint.optimizer["step"] == resumed.checkpoint.optimizer["step"] == 8


def test_resume_rejects_tampered_config(data):
    tr, _ = data
    ck = train(CFG, tr, epochs=1, eval_every=0).checkpoint
    ck.config["lr"] = 1.0
    with pytest.raises(ValueError, match="hash"):
        train(CFG, tr, resume=ck)


def test_divergence_keeps_last_good_state(data, monkeypatch):
    tr, _ = data
    calls = {"n": 0}
    real = TSTNet.loss

    def flaky(self, batch):
        calls["n"] += 1
        out = real(self, batch)
        if calls["n"] == 3:  # first batch of epoch 2
            from tstnet.nnmath import check_finite
            return check_finite(out * float("nan"), "loss")
        return out

    monkeypatch.setattr(TSTNet, "loss", flaky)
    with pytest.raises(TrainingDiverged, match="epoch 2") as e:
        train(CFG, tr, eval_every=0)
    ck = e.value.checkpoint
    assert ck.epoch == 1 and len(ck.history) == 1
    assert all(torch.isfinite(p).all() for p in ck.params.values())


def test_every_ablation_flag_changes_the_loss():
    cfg = PRESETS["tiny"]
    model = TSTNet(cfg, seed=0).double()
    batch = random_batch(cfg, 2, torch.Generator().manual_seed(0))
    with torch.no_grad():
        base = model.loss(batch).item()
        for flag in ABLATIONS:
            model.set_config(cfg.replace(**{flag: True}))
            assert model.loss(batch).item() != base, flag


def test_no_refine_flag_is_live():
    cfg = PRESETS["tiny"]
    model = TSTNet(cfg, seed=0).double()
    batch = random_batch(cfg, 2, torch.Generator().manual_seed(0))
    dur = batch.durations[0]
    grid = {(s * dur / cfg.M, (e + 1) * dur / cfg.M) for s, e in model.localizer.proposals.tolist()}
    refined = model.predict(batch, top_n=16)[0]
    model.set_config(cfg.replace(no_refine=True))
    raw = model.predict(batch, top_n=16)[0]
    assert all((p.t_start, p.t_end) in grid for p in raw)
    assert any((p.t_start, p.t_end) not in grid for p in refined)


def test_predictions_file_round_trip(data, tmp_path):
    tr, te = data
    model = train(CFG.replace(epochs=1), tr, eval_every=0).model
    preds = predict_dataset(model, te, top_n=3)
    write_predictions(tmp_path / "p.jsonl", preds)
    back = read_predictions(tmp_path / "p.jsonl")
    assert back == preds
    assert all(len(v) == 3 for v in back.values())
    for ep, ps in back.items():
        assert all(0 <= p.t_start < p.t_end <= 32 for p in ps)
        assert [p.score for p in ps] == sorted((p.score for p in ps), reverse=True)


def test_evaluate_and_throughput(data):
    tr, te = data
    model = TSTNet(CFG)
    rep, preds, loss = evaluate_model(model, te)
    assert rep.episodes == 4 and np.isfinite(loss) and set(preds) == set(te.ids)
    tp = measure_throughput(model, te)
    assert tp["v_qps"] > 0 and tp["parameters"] == sum(p.numel() for p in model.parameters())


def test_checkpoint_model_restores_weights(data, tmp_path):
    tr, _ = data
    res = train(CFG.replace(epochs=1), tr, eval_every=0)
    res.checkpoint.save(tmp_path / "c.pt")
    m = Checkpoint.load(tmp_path / "c.pt").model()
    assert same_params(dict(m.state_dict()), dict(res.model.state_dict()))
