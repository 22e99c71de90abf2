"""Class-incremental update tests: head growth, herding, distillation math,
bias correction, and the five update strategies."""

import math

import numpy as np
import pytest

from mgtlab.continual import (
    PAPER_LITERAL_UPDATE_LR,
    TECHNIQUES,
    BiasCorrection,
    CILConfig,
    CILState,
    ExemplarStore,
    LwFConfig,
    bic_correct,
    cil_update,
    distillation_penalty,
    expand_head,
    fit_bic,
    lwf_loss,
    resolve_update_lr,
    select_exemplars,
    weighted_ce,
)
from mgtlab.corpus import Document
from mgtlab.neural import HashingEncoder, TrainConfig, train_supervised
from mgtlab.util import ContractError, DataError


def mk(i, text, label):
    return Document(id=f"c{i:03d}", text=text, label=label)


def class_docs(label, pool_prefix, n, seed):
    rng = np.random.default_rng(seed)
    pool = [f"{pool_prefix}{i}" for i in range(10)]
    return [mk(i, " ".join(rng.choice(pool, size=15)), label)
            for i in range(n)]


@pytest.fixture(scope="module")
def base_state():
    """Two-class base model plus herded exemplars, ready for an update."""
    human = class_docs("human", "h", 24, seed=0)
    gen_a = class_docs("gen-a", "a", 24, seed=1)
    pairs = [(d, d.label) for d in human + gen_a]
    model = train_supervised(
        pairs, TrainConfig(learning_rate=0.5, batch_size=8, epochs=4, seed=2))
    store = ExemplarStore(budget_per_class=5)
    for label, docs in (("human", human), ("gen-a", gen_a)):
        store.set(label, select_exemplars(model.embed_hidden, docs, 5))
    return CILState(model=model, classes=list(model.classes), exemplars=store,
                    base_config=TrainConfig(learning_rate=0.5, batch_size=8,
                                            epochs=4, seed=2))


@pytest.fixture(scope="module")
def new_docs():
    return [(d, "gen-b") for d in class_docs("gen-b", "b", 24, seed=3)]


# -- head expansion ---------------------------------------------------------

def test_expand_head_preserves_old_logits(base_state):
    model = base_state.model
    probe = [mk(900, "h0 h1 a2", "human"), mk(901, "a0 a1 a1", "gen-a")]
    before = [model.predict_logits(d) for d in probe]
    grown = expand_head(model, "gen-b")
    assert grown.classes == model.classes + ["gen-b"]
    for d, z_old in zip(probe, before):
        z = grown.predict_logits(d)
        assert np.array_equal(z[:-1], z_old)
        assert z[-1] == 0.0
    # the source model is untouched
    assert model.w_out.shape[0] == 2


def test_expand_head_duplicate_label(base_state):
    with pytest.raises(DataError, match="already present"):
        expand_head(base_state.model, "gen-a")


# -- exemplar selection -----------------------------------------------------

def test_herding_budget_one_picks_mean_doc():
    docs = [mk(i, t, "x") for i, t in enumerate(["lo", "mid", "hi"])]
    emb = {"lo": 0.0, "mid": 1.0, "hi": 2.0}
    embed = lambda d: np.array([emb[d.text]])
    picked = select_exemplars(embed, docs, budget=1)
    assert [d.text for d in picked] == ["mid"]


def test_herding_is_greedy_prefix():
    rng = np.random.default_rng(4)
    docs = [mk(i, f"doc{i}", "x") for i in range(9)]
    vecs = {d.text: rng.normal(size=3) for d in docs}
    embed = lambda d: vecs[d.text]
    two = select_exemplars(embed, docs, budget=2)
    four = select_exemplars(embed, docs, budget=4)
    assert [d.id for d in four[:2]] == [d.id for d in two]


def test_herding_tie_prefers_earlier_doc():
    docs = [mk(i, "same text", "x") for i in range(3)]
    embed = lambda d: np.array([1.0, 2.0])
    assert select_exemplars(embed, docs, budget=1)[0].id == "c000"


def test_budget_covers_everything():
    docs = [mk(i, f"t{i}", "x") for i in range(4)]
    out = select_exemplars(lambda d: np.zeros(2), docs, budget=10)
    assert out == list(docs)


def test_random_strategy_seeded():
    docs = [mk(i, f"t{i}", "x") for i in range(20)]
    embed = lambda d: np.zeros(1)
    a = select_exemplars(embed, docs, 6, seed=5, strategy="random")
    b = select_exemplars(embed, docs, 6, seed=5, strategy="random")
    c = select_exemplars(embed, docs, 6, seed=6, strategy="random")
    assert [d.id for d in a] == [d.id for d in b]
    assert len(a) == 6 and {d.id for d in a} <= {d.id for d in docs}
    assert [d.id for d in a] != [d.id for d in c]


def test_exemplar_errors():
    docs = [mk(0, "t", "x")]
    embed = lambda d: np.zeros(1)
    with pytest.raises(DataError, match="budget"):
        select_exemplars(embed, docs, 0)
    with pytest.raises(DataError, match="no documents"):
        select_exemplars(embed, [], 3)
    with pytest.raises(ContractError, match="strategy"):
        select_exemplars(embed, [mk(i, f"t{i}", "x") for i in range(5)], 2,
                         strategy="kmeans")


def test_store_budget_enforced():
    store = ExemplarStore(budget_per_class=2)
    docs = [mk(i, f"t{i}", "x") for i in range(3)]
    with pytest.raises(DataError, match="exceed"):
        store.set("x", docs)
    store.set("x", docs[:2])
    assert [d.id for d in store.get("x")] == ["c000", "c001"]
    assert store.all_pairs() == [(docs[0], "x"), (docs[1], "x")]


# -- losses -----------------------------------------------------------------

def log_softmax_ref(z):
    z = np.asarray(z, dtype=np.float64)
    m = z.max()
    return z - (m + math.log(np.exp(z - m).sum()))


def test_lwf_lambda_zero_is_plain_ce():
    new = [0.3, -1.2, 0.7, 0.0]
    old = [9.9, 9.9, 9.9]          # would dominate if the branch ever ran
    got = lwf_loss(new, old, target=2, cfg=LwFConfig(lam=0.0))
    assert got == -log_softmax_ref(new)[2]


def test_lwf_zero_kl_when_logits_agree():
    old = [0.5, -0.4]
    new = [0.5, -0.4, -2.0]
    loss = lwf_loss(new, old, target=2, cfg=LwFConfig(lam=3.0, temperature=1.0))
    assert loss == pytest.approx(-log_softmax_ref(new)[2], abs=1e-12)


def test_lwf_hand_value():
    old = [1.0, 0.0]
    new = [0.0, 0.0, 0.0]
    cfg = LwFConfig(lam=0.5, temperature=2.0)
    lp_old = log_softmax_ref([0.5, 0.0])
    lp_new = log_softmax_ref([0.0, 0.0])
    kl = float((np.exp(lp_old) * (lp_old - lp_new)).sum())
    want = -log_softmax_ref(new)[1] + 0.5 * 4.0 * kl
    assert lwf_loss(new, old, target=1, cfg=cfg) == pytest.approx(want,
                                                                  abs=1e-12)


def test_lwf_old_longer_than_new():
    with pytest.raises(DataError, match="longer"):
        lwf_loss([0.0, 1.0], [0.0, 1.0, 2.0], target=0)


def test_lwf_config_validation():
    with pytest.raises(DataError):
        LwFConfig(lam=-0.1).validate()
    with pytest.raises(DataError):
        LwFConfig(temperature=0.0).validate()


def test_distillation_penalty_matches_per_example_loss():
    """Batch closure must equal the mean of per-example distillation terms."""
    rng = np.random.default_rng(7)
    old = rng.normal(size=(5, 3))
    z = rng.normal(size=(5, 4))
    cfg = LwFConfig(lam=0.3, temperature=2.5)
    loss, _ = distillation_penalty(old, cfg)(z)
    per = [lwf_loss(z[i], old[i], target=0, cfg=cfg)
           - lwf_loss(z[i], old[i], target=0, cfg=LwFConfig(lam=0.0))
           for i in range(5)]
    assert loss == pytest.approx(np.mean(per), abs=1e-12)


def test_distillation_gradient_finite_difference():
    rng = np.random.default_rng(11)
    old = rng.normal(size=(4, 3))
    z = rng.normal(size=(4, 5))
    penalty = distillation_penalty(old, LwFConfig(lam=0.7, temperature=1.5))
    _, dz = penalty(z)
    eps = 1e-6
    for i, j in [(0, 0), (1, 2), (3, 4), (2, 1)]:
        up = z.copy(); up[i, j] += eps
        down = z.copy(); down[i, j] -= eps
        numeric = (penalty(up)[0] - penalty(down)[0]) / (2 * eps)
        assert numeric == pytest.approx(dz[i, j], abs=1e-8)


def test_penalty_scales_linearly_in_lambda():
    rng = np.random.default_rng(2)
    old = rng.normal(size=(3, 2))
    z = rng.normal(size=(3, 3))
    l1, d1 = distillation_penalty(old, LwFConfig(lam=0.2))(z)
    l2, d2 = distillation_penalty(old, LwFConfig(lam=0.4))(z)
    assert l2 == pytest.approx(2 * l1, rel=1e-12)
    assert np.allclose(d2, 2 * d1)


def test_weighted_ce_hand_value():
    # counts [1, 3]: w_0 = 4/(2*1) = 2
    assert weighted_ce([0.0, 0.0], 0, [1, 3]) == pytest.approx(
        2 * math.log(2), abs=1e-12)
    with pytest.raises(DataError, match="positive"):
        weighted_ce([0.0, 0.0], 0, [1, 0])


# -- bias correction --------------------------------------------------------

def test_bic_correct_touches_only_new_entries():
    bc = BiasCorrection(alpha=0.5, beta=-1.0, old_n=2)
    z = np.array([[1.0, 2.0, 3.0, 4.0], [0.0, -1.0, -2.0, -3.0]])
    out = bic_correct(z, bc)
    assert np.array_equal(out[:, :2], z[:, :2])
    assert np.allclose(out[:, 2:], 0.5 * z[:, 2:] - 1.0)
    with pytest.raises(DataError, match="old_n"):
        bic_correct(np.zeros(2), BiasCorrection(1.0, 0.0, old_n=2))


def test_fit_bic_reduces_new_class_bias(base_state, new_docs):
    """A new head trained hard on the new class over-predicts it; the fitted
    correction must push its logit down and restore old-class predictions."""
    state = cil_update(base_state, new_docs, "iCaRL",
                       CILConfig(learning_rate=2.0, epochs=4, seed=0))
    model = state.model
    # bias large enough that every validation doc argmaxes to the new class
    model.b_out[2] += 20.0
    val = state.exemplars.all_pairs()
    bc = fit_bic(model, val, old_n=2)
    assert bc.old_n == 2
    assert bc.beta < 0
    X = model.encoder.encode_batch([d.text for d, _ in val])
    z = model.logits_batch(X)
    y = np.array([model.classes.index(l) for _, l in val])
    raw_acc = (z.argmax(axis=1) == y).mean()
    fixed = bic_correct(z, bc)
    fixed_acc = (fixed.argmax(axis=1) == y).mean()
    assert raw_acc < 0.5 < fixed_acc
    # the fit can't do worse than the identity correction it starts from
    def mean_ce(logits):
        lse = np.log(np.exp(logits - logits.max(axis=1, keepdims=True))
                     .sum(axis=1)) + logits.max(axis=1)
        return float((lse - logits[np.arange(len(y)), y]).mean())
    assert mean_ce(fixed) < mean_ce(z)


def test_fit_bic_requires_all_classes(base_state, new_docs):
    state = cil_update(base_state, new_docs, "iCaRL",
                       CILConfig(learning_rate=1.0, epochs=1, seed=0))
    only_new = [(d, l) for d, l in new_docs[:4]]
    with pytest.raises(DataError, match="missing"):
        fit_bic(state.model, only_new, old_n=2)


# -- configuration ----------------------------------------------------------

def test_resolve_update_lr():
    base = TrainConfig(learning_rate=0.8)
    assert resolve_update_lr(CILConfig(), base) == 0.2
    assert resolve_update_lr(CILConfig(learning_rate=0.05), base) == 0.05
    assert resolve_update_lr(CILConfig(preset="paper-literal"), base) \
        == PAPER_LITERAL_UPDATE_LR
    # explicit rate wins over the preset
    assert resolve_update_lr(
        CILConfig(learning_rate=0.3, preset="paper-literal"), base) == 0.3
    with pytest.raises(ContractError, match="preset"):
        resolve_update_lr(CILConfig(preset="fast"), base)


# -- the update step --------------------------------------------------------

def test_update_validations(base_state, new_docs):
    with pytest.raises(ContractError, match="technique"):
        cil_update(base_state, new_docs, "EWC")
    with pytest.raises(DataError, match="no new-class"):
        cil_update(base_state, [], "Normal")
    seen = [(d, "gen-a") for d, _ in new_docs[:2]]
    with pytest.raises(DataError, match="not new"):
        cil_update(base_state, seen, "Normal")
    bare = CILState(model=base_state.model, classes=list(base_state.classes),
                    exemplars=ExemplarStore(budget_per_class=5),
                    base_config=base_state.base_config)
    with pytest.raises(DataError, match="exemplars"):
        cil_update(bare, new_docs, "iCaRL")


def test_normal_update_mechanics(base_state, new_docs):
    cfg = CILConfig(learning_rate=0.5, epochs=2, seed=1)
    out = cil_update(base_state, new_docs, "Normal", cfg)
    assert out.stage == base_state.stage + 1
    assert out.classes == ["gen-a", "human", "gen-b"] \
        or out.classes == base_state.classes + ["gen-b"]
    assert out.model.train_log["technique"] == "Normal"
    assert out.model.train_log["learning_rate"] == 0.5
    assert len(out.model.train_log["epoch_losses"]) == 2
    # pre-update snapshot is frozen and kept
    assert out.old_snapshot is not None and out.old_snapshot.frozen
    # the input state's model is untouched
    assert base_state.model.w_out.shape[0] == 2
    # non-replay path leaves the new class without exemplars
    assert out.exemplars.get("gen-b") == []


def test_lwf_lambda_zero_is_bitwise_normal(base_state, new_docs):
    """With the distillation weight at zero the LwF trajectory must be the
    Normal trajectory exactly, not merely close."""
    cfg0 = CILConfig(learning_rate=0.5, epochs=2, seed=6,
                     lwf=LwFConfig(lam=0.0))
    a = cil_update(base_state, new_docs, "Normal", cfg0)
    b = cil_update(base_state, new_docs, "LwF", cfg0)
    for name in ("w_hidden", "b_hidden", "w_out", "b_out"):
        assert np.array_equal(getattr(a.model, name),
                              getattr(b.model, name)), name


def test_lwf_lambda_positive_diverges_from_normal(base_state, new_docs):
    cfg = CILConfig(learning_rate=0.5, epochs=2, seed=6,
                    lwf=LwFConfig(lam=0.5))
    a = cil_update(base_state, new_docs, "Normal", cfg)
    b = cil_update(base_state, new_docs, "LwF", cfg)
    assert not np.array_equal(a.model.w_out, b.model.w_out)


def test_replay_refreshes_new_class_exemplars(base_state, new_docs):
    out = cil_update(base_state, new_docs, "iCaRL",
                     CILConfig(learning_rate=0.5, epochs=1, seed=2))
    picked = out.exemplars.get("gen-b")
    assert 0 < len(picked) <= out.exemplars.budget_per_class
    assert {d.label for d in picked} == {"gen-b"}
    # old-class exemplars carried over
    assert len(out.exemplars.get("human")) == 5


def test_bic_state_carries_correction(base_state, new_docs):
    out = cil_update(base_state, new_docs, "BiC",
                     CILConfig(learning_rate=0.5, epochs=1, seed=2))
    assert out.bias_correction is not None
    assert out.bias_correction.old_n == 2
    normal = cil_update(base_state, new_docs, "Normal",
                        CILConfig(learning_rate=0.5, epochs=1, seed=2))
    assert normal.bias_correction is None


def test_every_technique_runs_and_learns_new_class(base_state, new_docs):
    cfg = CILConfig(learning_rate=0.5, epochs=2, seed=3)
    probe = class_docs("gen-b", "b", 6, seed=9)
    for technique in TECHNIQUES:
        out = cil_update(base_state, new_docs, technique, cfg)
        hits = sum(out.model.predict_label(d) == "gen-b" for d in probe)
        assert hits >= 5, technique


def test_deterministic_update(base_state, new_docs):
    cfg = CILConfig(learning_rate=0.5, epochs=2, seed=8)
    a = cil_update(base_state, new_docs, "Combine", cfg)
    b = cil_update(base_state, new_docs, "Combine", cfg)
    for name in ("w_hidden", "b_hidden", "w_out", "b_out"):
        assert np.array_equal(getattr(a.model, name),
                              getattr(b.model, name)), name
    assert a.bias_correction.alpha == b.bias_correction.alpha
