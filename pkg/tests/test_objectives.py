import math

import numpy as np
import pytest

from vlreward.encoders import SimilarityFn
from vlreward.exceptions import BatchContractError, ConfigError, UsageError
from vlreward.numcore import Tensor, grad_check, logsumexp
from vlreward.objectives import (
    OBJECTIVE_TAGS,
    EmbeddingBatch,
    ObjectiveConfig,
    SumOf,
    build_objective,
    loss_infonce,
    loss_liv,
    loss_r3m,
    loss_tcn,
    loss_tcn_text,
    loss_triplet,
    loss_vip,
    loss_vip_text,
    redraws,
    sample_negatives,
)

ROLES = ("z_i", "z_j", "z_j1", "z_k", "v")


def random_batch(rs, B=4, d=5, negatives=None):
    return EmbeddingBatch(negatives=negatives, **{role: Tensor(rs.normal(size=(B, d))) for role in ROLES})


def cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def cyclic(B, count):
    return [[(b + n) % B for n in range(1, count + 1)] for b in range(B)]


def naive_tcn(e, count):
    B = len(e["z_i"])
    total = 0.0
    for b, negs in enumerate(cyclic(B, count)):
        pos = cos(e["z_i"][b], e["z_j"][b])
        logits = [pos, cos(e["z_i"][b], e["z_k"][b])] + [cos(e["z_i"][b], e["z_i"][n]) for n in negs]
        total += math.log(sum(math.exp(x) for x in logits)) - pos
    return total / B


def naive_tcn_text(e, count):
    B = len(e["z_i"])
    total = 0.0
    for b, negs in enumerate(cyclic(B, count)):
        pos = cos(e["z_j"][b], e["v"][b])
        logits = [pos, cos(e["z_i"][b], e["v"][b])] + [cos(e["z_j"][n], e["v"][b]) for n in negs]
        total += math.log(sum(math.exp(x) for x in logits)) - pos
    return total / B


def naive_vip(e, gamma, goal):
    B = len(e["z_i"])
    initial = (1 - gamma) * np.mean([-cos(e["z_i"][b], e[goal][b]) for b in range(B)])
    steps = [math.exp(cos(e["z_j"][b], e[goal][b]) + 1 - gamma * cos(e["z_j1"][b], e[goal][b])) for b in range(B)]
    return initial + math.log(sum(steps) / B)


def naive_infonce(e):
    B = len(e["z_k"])
    total = 0.0
    for b in range(B):
        denominator = sum(math.exp(cos(e["z_k"][j], e["v"][b])) for j in range(B) if j != b) / B
        total += math.log(denominator) - cos(e["z_k"][b], e["v"][b])
    return total / B


def naive_triplet(e, margin):
    B = len(e["v"])
    return sum(max(0.0, cos(e["v"][b], e["z_i"][b]) - cos(e["v"][b], e["z_j"][b]) + margin) for b in range(B))


@pytest.fixture
def cfg():
    return ObjectiveConfig(objective="liv", gamma=0.9, negatives_count=2)


@pytest.mark.parametrize("seed", range(5))
def test_losses_match_naive_formulas(cfg, seed):
    rs = np.random.RandomState(seed)
    batch = random_batch(rs, B=5)
    e = {role: getattr(batch, role).data for role in ROLES}
    assert loss_tcn(batch, cfg).item() == pytest.approx(naive_tcn(e, 2), abs=1e-10)
    assert loss_tcn_text(batch, cfg).item() == pytest.approx(naive_tcn_text(e, 2), abs=1e-10)
    assert loss_vip(batch, cfg).item() == pytest.approx(naive_vip(e, 0.9, "z_k"), abs=1e-10)
    assert loss_vip_text(batch, cfg).item() == pytest.approx(naive_vip(e, 0.9, "v"), abs=1e-10)
    assert loss_infonce(batch, cfg).item() == pytest.approx(naive_infonce(e), abs=1e-10)
    assert loss_triplet(batch, cfg).item() == pytest.approx(naive_triplet(e, 0.3), abs=1e-10)


def test_tcn_symmetric_case_is_log_three():
    batch = EmbeddingBatch(**{role: Tensor(np.ones((2, 3))) for role in ("z_i", "z_j", "z_k")})
    cfg = ObjectiveConfig(negatives_count=1)
    assert loss_tcn(batch, cfg).item() == pytest.approx(math.log(3.0), abs=1e-12)


def test_vip_zero_similarity_case_is_one():
    other = Tensor([[0.0, 1.0]])
    batch = EmbeddingBatch(z_i=other, z_j=other, z_j1=other, z_k=Tensor([[1.0, 0.0]]))
    assert loss_vip(batch, ObjectiveConfig()).item() == pytest.approx(1.0, abs=1e-12)


def test_triplet_margin_cases():
    v = Tensor([[1.0, 0.0]])
    satisfied = EmbeddingBatch(z_i=Tensor([[-1.0, 0.0]]), z_j=Tensor([[1.0, 0.0]]), v=v)
    tied = EmbeddingBatch(z_i=Tensor([[0.0, 1.0]]), z_j=Tensor([[0.0, 1.0]]), v=v)
    assert loss_triplet(satisfied, ObjectiveConfig()).item() == 0.0
    assert loss_triplet(tied, ObjectiveConfig()).item() == pytest.approx(0.3)


def test_infonce_identical_embeddings():
    batch = EmbeddingBatch(z_k=Tensor(np.ones((2, 3))), v=Tensor(np.ones((2, 3))))
    assert loss_infonce(batch, ObjectiveConfig()).item() == pytest.approx(-math.log(2.0), abs=1e-12)


def test_infonce_needs_two_elements():
    batch = EmbeddingBatch(z_k=Tensor(np.ones((1, 3))), v=Tensor(np.ones((1, 3))))
    with pytest.raises(ConfigError):
        loss_infonce(batch, ObjectiveConfig())


@pytest.mark.parametrize("seed", range(10))
def test_combined_losses_are_exact_sums(cfg, seed):
    batch = random_batch(np.random.RandomState(seed), B=4)
    assert loss_r3m(batch, cfg).item() == loss_tcn(batch, cfg).item() + loss_tcn_text(batch, cfg).item()
    expected = loss_vip(batch, cfg).item() + loss_vip_text(batch, cfg).item() + loss_infonce(batch, cfg).item()
    assert loss_liv(batch, cfg).item() == expected


LOSSES = [loss_tcn, loss_tcn_text, loss_vip, loss_vip_text, loss_infonce, loss_r3m, loss_liv, loss_triplet]


@pytest.mark.parametrize("d", [4, 16])
@pytest.mark.parametrize("B", [2, 4, 8])
@pytest.mark.parametrize("role", ROLES)
def test_gradients(B, d, role):
    cfg = ObjectiveConfig(negatives_count=1)
    for seed in range(20):
        batch = random_batch(np.random.RandomState(1000 * B + seed), B=B, d=d)

        for loss in LOSSES:

            def f(x):
                slots = {r: getattr(batch, r) for r in ROLES}
                slots[role] = x
                return loss(EmbeddingBatch(**slots), cfg)

            assert grad_check(f, getattr(batch, role).data) < 1e-4, (loss.__name__, seed)


@pytest.mark.parametrize("tag", OBJECTIVE_TAGS)
def test_cosine_losses_ignore_row_scale(tag):
    rs = np.random.RandomState(7)
    batch = random_batch(rs, B=6, d=8)
    scaled = EmbeddingBatch(
        **{r: Tensor(getattr(batch, r).data * rs.uniform(0.01, 100.0, (6, 1))) for r in ROLES}
    )
    objective = build_objective(ObjectiveConfig(objective=tag, negatives_count=2))
    assert objective(scaled).item() == pytest.approx(objective(batch).item(), abs=1e-8)


@pytest.mark.parametrize("shift", [-700.0, -3.0, 0.5, 40.0, 700.0])
def test_logsumexp_shift(shift):
    x = np.random.RandomState(0).normal(size=(5, 7))
    expected = logsumexp(Tensor(x), axis=1).data + shift
    np.testing.assert_allclose(logsumexp(Tensor(x + shift), axis=1).data, expected, rtol=0, atol=1e-12 * max(1.0, abs(shift)))


@pytest.mark.parametrize("tag", OBJECTIVE_TAGS)
def test_large_logits_stay_finite(tag):
    rs = np.random.RandomState(2)
    # neg_l2 logits of roughly -50 between unrelated rows
    batch = EmbeddingBatch(**{r: Tensor(rs.normal(scale=50.0 / np.sqrt(2 * 8), size=(6, 8))) for r in ROLES})
    objective = build_objective(ObjectiveConfig(objective=tag, negatives_count=2, similarity="neg_l2"))
    leaves = {r: Tensor(getattr(batch, r).data, requires_grad=True) for r in ROLES}
    loss = objective(EmbeddingBatch(**leaves))
    assert np.isfinite(loss.item())
    loss.backward()
    for r in objective.roles:
        assert np.all(np.isfinite(leaves[r].grad)), r


def test_missing_role():
    batch = EmbeddingBatch(z_i=Tensor(np.ones((2, 3))), z_j=Tensor(np.ones((2, 3))))
    with pytest.raises(BatchContractError, match="v"):
        loss_triplet(batch, ObjectiveConfig())


def test_explicit_negatives_override_cyclic(cfg):
    rs = np.random.RandomState(3)
    batch = random_batch(rs, B=4)
    table = sample_negatives(4, 2, np.random.RandomState(0))
    assert not np.any(table == np.arange(4)[:, None])
    fixed = EmbeddingBatch(negatives=np.array(cyclic(4, 2)), **{r: getattr(batch, r) for r in ROLES})
    assert loss_tcn(fixed, cfg).item() == loss_tcn(batch, cfg).item()


def test_negatives_need_larger_batch():
    batch = EmbeddingBatch(**{role: Tensor(np.ones((3, 2))) for role in ("z_i", "z_j", "z_k")})
    with pytest.raises(ConfigError):
        loss_tcn(batch, ObjectiveConfig(negatives_count=3))


def test_unknown_objective():
    with pytest.raises(UsageError):
        ObjectiveConfig(objective="clip")


@pytest.mark.parametrize("tag", OBJECTIVE_TAGS)
def test_build_objective(tag):
    objective = build_objective(ObjectiveConfig(objective=tag))
    expected = {"r3m": 2, "vip_text_plus_vip": 2, "liv": 3}
    if tag in expected:
        assert isinstance(objective, SumOf) and len(objective) == expected[tag]
    assert objective.name == tag


def test_redraws():
    assert redraws(ObjectiveConfig(objective="triplet", negatives_count=3)) == 3
    assert redraws(ObjectiveConfig(objective="r3m", negatives_count=3)) == 1


def test_similarity_from_string():
    assert ObjectiveConfig(similarity="neg_l2").similarity == SimilarityFn("neg_l2")
