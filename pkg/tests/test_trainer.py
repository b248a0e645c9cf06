import math

import numpy as np
import pytest

from mdctr import tensor as T
from mdctr.audit import random_batch, tiny_model
from mdctr.baseline import FIELDS, BaselineConfig, FeatureIndex, SharedBottomBaseline, train_shared_bottom
from mdctr.data import TRAIN, Dataset, SynthConfig, assign_splits, generate
from mdctr.errors import RegistryError, ValidationError
from mdctr.optim import SGD
from mdctr.prompt import InteractionRecord, build_vocab, render_prompt, words
from mdctr.tensor import NumericalError, Tensor
from mdctr.trainer import (
    DomainRegistry, TrainConfig, build_mask, compute_loss, evaluate, extend_domain, fit, mask_matrix,
    masked_loss, predict, reseed_dropout, set_dropout, train_step,
)


def bce(p, y):
    return -(y * np.log(p) + (1 - y) * np.log(1 - p))


# masks and routing -----------------------------------------------------------

def test_build_mask_examples():
    reg = DomainRegistry(("d1", "d2", "d3"))
    assert build_mask("d2", reg).tolist() == [0, 1, 0]
    assert build_mask("other", reg).tolist() == [0, 0, 0]
    assert build_mask("d1", DomainRegistry(("d1",))).tolist() == [1]
    assert reg.index("d3") == 3
    with pytest.raises(RegistryError):
        reg.index("other")


def test_mask_matrix_rows_match_build_mask():
    reg = DomainRegistry(("a", "b", "c"))
    doms = ["c", "x", "a", "b", "a"]
    m = mask_matrix(doms, reg)
    for i, d in enumerate(doms):
        np.testing.assert_array_equal(m[i], build_mask(d, reg))


@pytest.mark.parametrize("strict", [True, False])
def test_routing_is_bitwise(strict):
    model = tiny_model()
    b = random_batch(np.random.default_rng(0), 12, model.domains, domain_pool=[*model.domains, "zeta"])
    y = predict(model, b, strict=strict)
    with T.no_grad():
        taps = model.taps(b.ids, b.mask)
        gen = model.general(taps.last, b.mask).data
        direct = {n: model.dsns[n](taps).data for n in model.domains}
    for i, d in enumerate(b.domains):
        expect = gen[i] if d == "zeta" else direct[d][i]
        assert y[i].tobytes() == np.float64(expect).tobytes()


def test_force_general_ignores_dsns():
    model = tiny_model()
    b = random_batch(np.random.default_rng(1), 6, model.domains)
    with T.no_grad():
        gen = model.general(model.taps(b.ids, b.mask).last, b.mask).data
    np.testing.assert_array_equal(predict(model, b, force_general=True), gen)


# losses ----------------------------------------------------------------------

def test_half_predictions_give_two_ln2():
    loss, ld, lg = masked_loss(Tensor(np.array([[0.5, 0.9]])), Tensor(np.array([0.5])), np.array([1]),
                               np.array([[1, 0]]))
    assert float(loss.data) == pytest.approx(2 * math.log(2), abs=1e-6)
    assert float(ld.data) == pytest.approx(math.log(2), abs=1e-6)


def test_masked_loss_rejects_unregistered_training_samples():
    with pytest.raises(ValidationError):
        masked_loss(Tensor(np.full((2, 2), 0.5)), Tensor(np.full(2, 0.5)), np.array([1, 0]),
                    np.array([[1, 0], [0, 0]]))
    model = tiny_model()
    b = random_batch(np.random.default_rng(0), 4, model.domains, domain_pool=["zeta"])
    for strict in (True, False):
        with pytest.raises(ValidationError):
            compute_loss(model, b, strict)


def test_two_path_oracle_over_100_seeds(f64):
    model = tiny_model(seed=5)
    for seed in range(100):
        rng = np.random.default_rng(seed)
        b = random_batch(rng, int(rng.integers(1, 9)), model.domains)
        with T.no_grad():
            lm, ldm, lgm, _ = compute_loss(model, b, strict=True)
            ls, lds, lgs, _ = compute_loss(model, b, strict=False)
            taps = model.taps(b.ids, b.mask)
            own = np.array([model.dsns[d](taps).data[i] for i, d in enumerate(b.domains)])
            gen = model.general(taps.last, b.mask).data
        oracle_d = bce(own, b.labels).mean()
        assert abs(float(ldm.data) - float(lds.data)) < 1e-7
        assert abs(float(ldm.data) - oracle_d) < 1e-7
        assert abs(float(lgm.data) - bce(gen, b.labels).mean()) < 1e-7
        assert abs(float(lm.data) - (float(ldm.data) + float(lgm.data))) < 1e-7
        assert abs(float(lm.data) - float(ls.data)) < 1e-7


def test_modes_agree_under_dropout(f64):
    model = tiny_model(seed=6)
    set_dropout(model, 0.3)
    model.train()
    b = random_batch(np.random.default_rng(8), 10, model.domains)
    losses = []
    for strict in (True, False, True):
        reseed_dropout(model, 0, 5)
        losses.append(float(compute_loss(model, b, strict)[0].data))
    assert abs(losses[0] - losses[1]) < 1e-12
    assert losses[0] == losses[2]
    model.eval()
    assert abs(float(compute_loss(model, b, True)[0].data) - losses[0]) > 1e-6


def test_general_weight_scales_general_term(f64):
    model = tiny_model()
    b = random_batch(np.random.default_rng(2), 5, model.domains)
    with T.no_grad():
        l1, ld, lg, _ = compute_loss(model, b, strict=True, general_weight=0.25)
    assert float(l1.data) == pytest.approx(float(ld.data) + 0.25 * float(lg.data), abs=1e-12)


# steps -----------------------------------------------------------------------

@pytest.mark.parametrize("strict", [True, False])
def test_single_domain_batch_updates_only_its_groups(strict):
    model = tiny_model()
    b = random_batch(np.random.default_rng(3), 8, model.domains, domain_pool=["alpha"])
    cfg = TrainConfig(optimizer="sgd", strict_mask=strict)
    rec = train_step(model, b, SGD(model.trainable(), 0.01), cfg)
    assert rec.updated_groups == ["backbone", "dsn.alpha", "general"]


def test_sgd_steps_are_deterministic():
    deltas = []
    for _ in range(2):
        model = tiny_model(seed=7)
        b = random_batch(np.random.default_rng(4), 8, model.domains)
        before = {k: v.copy() for k, v in model.state_dict().items()}
        train_step(model, b, SGD(model.trainable(), 0.05), TrainConfig(optimizer="sgd"))
        deltas.append({k: v - before[k] for k, v in model.state_dict().items()})
    for k in deltas[0]:
        assert deltas[0][k].tobytes() == deltas[1][k].tobytes()


def test_nan_loss_aborts_with_fingerprint():
    model = tiny_model()
    model.general.tower.head.bias.data[:] = np.nan
    b = random_batch(np.random.default_rng(0), 4, model.domains)
    with pytest.raises(NumericalError, match=b.fingerprint()):
        train_step(model, b, SGD(model.trainable(), 0.1), TrainConfig(optimizer="sgd"))


def test_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(lr_low=1e-3, lr_high=1e-4).validate()
    with pytest.raises(ValidationError):
        TrainConfig(optimizer="rmsprop").validate()


# fit -------------------------------------------------------------------------

def separable(domains=("alpha", "beta"), per_domain=60, seed=0):
    rng = np.random.default_rng(seed)
    records = []
    for d in domains:
        for i in range(per_domain):
            y = int(rng.integers(2))
            records.append(InteractionRecord(d, f"u{i % 7}", [], f"i{i}", "good item" if y else "bad item",
                                             "acme", "1.00", y))
    return Dataset(records, assign_splits([r.domain for r in records], seed))


def vocab_model(ds, seed=0, domains=None):
    vocab = build_vocab((render_prompt(r) for r in ds.records), 200)
    seq = max(len(words(render_prompt(r))) for r in ds.records) + 2
    return vocab, tiny_model(seed, vocab_size=len(vocab), seq_len=seq, domains=domains or ds.domains)


def test_fit_drives_separable_loss_down():
    ds = separable()
    vocab, model = vocab_model(ds)
    cfg = TrainConfig(batch_size=16, epochs=20, lr_low=1e-3, lr_high=1e-2, cycle_epochs=4, dropout=0.0)
    rep = fit(model, ds, cfg, vocab)
    last = [rep.series("loss", "train", d)[-1] for d in ds.domains]
    assert max(last) < 0.3, last
    assert set(rep.auc_series()) == set(ds.domains)
    assert all(len(s) == 20 for s in rep.auc_series().values())


def test_fit_schedule_hits_bounds_and_audits_every_step():
    ds = separable(per_domain=40)
    vocab, model = vocab_model(ds)
    cfg = TrainConfig(batch_size=8, epochs=2, lr_low=1e-4, lr_high=1e-3, cycle_epochs=1, dropout=0.0)
    rep = fit(model, ds, cfg, vocab)
    n_train = int((ds.split == TRAIN).sum())
    steps = -(-n_train // 8)
    assert len(rep.audit) == 2 * steps
    lrs = [r.lr for r in rep.audit]
    assert lrs[0] == 1e-4 and lrs[steps] == 1e-4
    assert lrs[steps // 2] == 1e-3
    assert all(1e-4 <= lr <= 1e-3 for lr in lrs)


def test_fit_restores_best_epoch_and_matches_evaluate():
    ds = separable(per_domain=40)
    vocab, model = vocab_model(ds)
    rep = fit(model, ds, TrainConfig(batch_size=16, epochs=3, dropout=0.0), vocab)
    from mdctr.trainer import encode_dataset
    valid = encode_dataset(ds.subset(1), vocab, model.cfg.backbone.max_seq_len)
    aucs = evaluate(model, valid)
    for d, a in aucs.items():
        assert a == pytest.approx(rep.series("auc", "valid", d)[rep.best_epoch], abs=1e-7)


def test_fit_errors():
    ds = separable(per_domain=40)
    vocab, model = vocab_model(ds, domains=["alpha"])
    with pytest.raises(RegistryError):
        fit(model, ds, TrainConfig(epochs=1), vocab)
    empty = Dataset(ds.records, np.full(len(ds), TRAIN))
    vocab, model = vocab_model(ds)
    with pytest.raises(ValidationError):
        fit(model, empty, TrainConfig(epochs=1), vocab)


def test_extend_domain_trains_only_new_dsn():
    ds = separable(domains=("alpha", "beta", "gamma"), per_domain=40)
    vocab, model = vocab_model(ds, domains=["alpha", "beta"])
    cfg = TrainConfig(batch_size=16, epochs=1, dropout=0.0)
    fit(model, ds.subset(domains=["alpha", "beta"]), cfg, vocab)
    from mdctr.trainer import encode_dataset
    test_old = encode_dataset(ds.subset(2, ["alpha", "beta"]), vocab, model.cfg.backbone.max_seq_len)
    before = predict(model, test_old)
    sums = model.checksums()
    rep = extend_domain(model, ds.subset(domains=["gamma"]), cfg, vocab)
    assert model.domains == ["alpha", "beta", "gamma"]
    assert rep.extra["changed_groups"] == []
    after = model.checksums()
    assert all(after[g] == sums[g] for g in sums)
    np.testing.assert_array_equal(predict(model, test_old), before)
    assert set(rep.auc_series()) == {"gamma"}
    with pytest.raises(RegistryError):
        extend_domain(model, ds.subset(domains=["gamma"]), cfg, vocab)


# shared-bottom baseline ---------------------------------------------------------

def test_baseline_lookup_equals_one_hot_product():
    ds = generate(SynthConfig(samples=(50, 50, 20), num_users=30, seed=2))
    index = FeatureIndex(ds.records)
    model = SharedBottomBaseline(index, ds.domains, BaselineConfig(embed_dim=4))
    feats = index.encode(ds.records[:5])
    for j, table in enumerate(model.tables):
        one_hot = np.eye(index.size(FIELDS[j]))[feats[:, j]]
        np.testing.assert_allclose(table(feats[:, j]).data, one_hot @ table.weight.data, atol=1e-7)
    assert index.encode([InteractionRecord("new", "nobody", [], "x", "t", "b", "1", 0)]).tolist() == [[0, 0, 0, 0]]
    assert model(feats).shape == (5, 3)


def test_baseline_training_is_deterministic():
    ds = generate(SynthConfig(samples=(200, 200, 60), num_users=40, seed=3))
    cfg = TrainConfig(batch_size=32, epochs=2)
    runs = [train_shared_bottom(ds, cfg) for _ in range(2)]
    s0, s1 = (m.state_dict() for m, _ in runs)
    for k in s0:
        assert s0[k].tobytes() == s1[k].tobytes()
    assert runs[0][1].rows == runs[1][1].rows
    assert set(runs[0][1].auc_series()) == set(ds.domains)
