import math

import pytest
import torch

import gradients
from protoreplay.classifier import MLPClassifier
from protoreplay.conditioning import ClassPrototype, EmbeddingTable, PrototypeStore
from protoreplay.denoiser import VectorDenoiser
from protoreplay.errors import ConfigError, ContractViolation
from protoreplay.losses import (LossBreakdown, NoiseDraw, classifier_loss, de_loss, dm_loss, draw_noise,
                                total_loss)
from protoreplay.schedule import build_schedule


class _Constant(torch.nn.Module):
    """eps_theta that ignores its input and returns a fixed value."""

    def __init__(self, value):
        super().__init__()
        self.value = torch.nn.Parameter(torch.as_tensor(value, dtype=torch.float64))

    def forward(self, x_k, k, prototype, label_embedding):
        return self.value.expand_as(x_k)


def _setup(dim=2, classes=(1, 2, 3)):
    table = EmbeddingTable.from_hash(list(classes), dimension=4)
    store = PrototypeStore()
    for c in classes:
        store.add(ClassPrototype(c, torch.nn.Parameter(torch.full((dim,), float(c), dtype=torch.float64)),
                                 origin_task=c))
    return table, store


def test_dm_loss_hand_value():
    # eps_theta = 0 gives ||eps||^2 per sample, summed over dims, averaged over the batch
    table, store = _setup()
    s = build_schedule(10)
    eps = torch.tensor([[1.0, 2.0], [0.0, 3.0]], dtype=torch.float64)
    draw = NoiseDraw(torch.tensor([1, 10]), eps, torch.tensor([0.9, 0.9], dtype=torch.float64))
    loss = dm_loss(_Constant([0.0, 0.0]), s, torch.zeros(2, 2, dtype=torch.float64), torch.tensor([1, 2]),
                   store, table, 0.2, draw=draw)
    assert loss.item() == pytest.approx((5.0 + 9.0) / 2, abs=1e-15)


def test_dm_loss_perfect_prediction_is_zero():
    table, store = _setup()
    s = build_schedule(10)
    eps = torch.tensor([[0.5, -0.5]], dtype=torch.float64)
    draw = NoiseDraw(torch.tensor([3]), eps, torch.tensor([0.5], dtype=torch.float64))
    loss = dm_loss(_Constant([0.5, -0.5]), s, torch.zeros(1, 2, dtype=torch.float64), torch.tensor([1]),
                   store, table, 0.2, draw=draw)
    assert loss.item() == 0.0


def test_dm_loss_needs_prototype_and_embedding():
    table, store = _setup()
    s = build_schedule(10)
    g = torch.Generator().manual_seed(0)
    with pytest.raises(ContractViolation):
        dm_loss(_Constant([0.0, 0.0]), s, torch.zeros(1, 2, dtype=torch.float64), torch.tensor([7]),
                store, table, 0.2, rng=g)


def test_severed_label_wire_makes_drop_rate_irrelevant():
    torch.manual_seed(0)
    net = VectorDenoiser(2, 4, hidden=8, label_conditioning=False).double()
    table, store = _setup()
    s = build_schedule(10)
    x0 = torch.randn(6, 2, dtype=torch.float64)
    y = torch.tensor([1, 2, 3, 1, 2, 3])
    draw = draw_noise(s, x0, torch.Generator().manual_seed(3))
    a = dm_loss(net, s, x0, y, store, table, 0.0, draw=draw)
    b = dm_loss(net, s, x0, y, store, table, 1.0, draw=draw)
    assert torch.equal(a, b)
    wired = VectorDenoiser(2, 4, hidden=8).double()
    assert not torch.equal(dm_loss(wired, s, x0, y, store, table, 0.0, draw=draw),
                           dm_loss(wired, s, x0, y, store, table, 1.0, draw=draw))


def test_dm_loss_unbiased_over_steps():
    torch.manual_seed(0)
    net = VectorDenoiser(2, 4, hidden=8).double()
    table, store = _setup()
    s = build_schedule(5, 0.05, 0.3)
    x0 = torch.tensor([[0.4, -0.3]], dtype=torch.float64)
    eps = torch.tensor([[1.1, 0.2]], dtype=torch.float64)
    y = torch.tensor([2])
    keep = torch.tensor([1.0], dtype=torch.float64)
    per_k = torch.stack([dm_loss(net, s, x0, y, store, table, 0.0,
                                 draw=NoiseDraw(torch.tensor([k]), eps, keep)).detach()
                         for k in range(1, 6)])
    exact = float(per_k.mean())
    n = 100_000
    g = torch.Generator().manual_seed(11)
    ks = torch.randint(1, 6, (n,), generator=g)
    with torch.no_grad():
        mc = float(dm_loss(net, s, x0.expand(n, 2), y.expand(n), store, table, 0.0,
                           draw=NoiseDraw(ks, eps.expand(n, 2), keep.expand(n))))
    se = math.sqrt(float(per_k.var(unbiased=False)) / n)
    assert abs(mc - exact) <= 3 * se


def test_de_loss_zero_for_identical_conditioning():
    table, store = _setup()
    s = build_schedule(10)
    net = VectorDenoiser(2, 4, hidden=8).double()
    x0 = torch.randn(3, 2, dtype=torch.float64)
    g = torch.Generator().manual_seed(0)
    assert de_loss(net, s, x0, torch.tensor([2, 2, 2]), {2: 2}, store, table, rng=g).item() == 0.0


def test_de_loss_linear_in_k():
    table, store = _setup()
    s = build_schedule(10)

    class _Split(torch.nn.Module):
        # output depends on the prototype only, so the branch gap is constant in k
        def forward(self, x_k, k, prototype, label_embedding):
            return prototype

    x0 = torch.zeros(1, 2, dtype=torch.float64)
    eps = torch.zeros(1, 2, dtype=torch.float64)
    u = torch.tensor([0.5], dtype=torch.float64)
    at = lambda k: de_loss(_Split(), s, x0, torch.tensor([2]), {2: 1}, store, table,
                           draw=NoiseDraw(torch.tensor([k]), eps, u)).item()
    assert at(1) == pytest.approx(2.0)  # ||(2,2) - (1,1)||^2
    assert at(10) == pytest.approx(10 * at(1))


def test_de_loss_missing_neighbour():
    table, store = _setup()
    s = build_schedule(10)
    g = torch.Generator().manual_seed(0)
    with pytest.raises(ContractViolation):
        de_loss(_Constant([0.0, 0.0]), s, torch.zeros(2, 2, dtype=torch.float64), torch.tensor([2, 3]),
                {2: 1}, store, table, rng=g)
    with pytest.raises(ContractViolation):
        de_loss(_Constant([0.0, 0.0]), s, torch.zeros(0, 2, dtype=torch.float64),
                torch.zeros(0, dtype=torch.long), {2: 1}, store, table, rng=g)


def test_de_loss_leaves_neighbour_prototype_constant():
    table, store = _setup()
    s = build_schedule(10)
    net = VectorDenoiser(2, 4, hidden=8).double()
    x0 = torch.randn(4, 2, dtype=torch.float64)
    loss = de_loss(net, s, x0, torch.tensor([3, 3, 3, 3]), {3: 1}, store, table,
                   rng=torch.Generator().manual_seed(0))
    loss.backward()
    assert store.get(1).value.grad is None
    assert store.get(3).value.grad is not None and float(store.get(3).value.grad.abs().sum()) > 0


def test_de_loss_non_negative():
    table, store = _setup()
    s = build_schedule(10)
    for seed in range(5):
        torch.manual_seed(seed)
        net = VectorDenoiser(2, 4, hidden=8).double()
        x0 = torch.randn(4, 2, dtype=torch.float64)
        v = de_loss(net, s, x0, torch.tensor([2, 3, 2, 3]), {2: 1, 3: 1}, store, table,
                    rng=torch.Generator().manual_seed(seed))
        assert v.item() >= 0


def test_total_loss_arithmetic():
    assert total_loss(1.0, 100.0, 1e-4).total == pytest.approx(1.01, abs=1e-15)
    out = total_loss(torch.tensor(2.5), torch.tensor(7.0), 0.0)
    assert float(out.total) == 2.5
    assert out.as_floats() == (2.5, 7.0, 2.5)
    with pytest.raises(ConfigError):
        total_loss(1.0, 1.0, -1e-4)


def test_loss_breakdown_invariant_random():
    g = torch.Generator().manual_seed(0)
    for _ in range(20):
        a, b, gamma = torch.rand(3, generator=g, dtype=torch.float64).tolist()
        out = total_loss(a, b, gamma)
        assert isinstance(out, LossBreakdown) and out.total == a + gamma * b


def test_classifier_loss_matches_cross_entropy_by_hand():
    clf = MLPClassifier(2, 3, hidden=4).double()
    x = torch.randn(4, 2, dtype=torch.float64)
    y = torch.tensor([1, 3, 2, 3])
    logits = clf(x)
    ref = sum(-torch.log_softmax(logits[i], 0)[y[i] - 1] for i in range(4)) / 4
    assert classifier_loss(clf, x, y).item() == pytest.approx(ref.item(), abs=1e-14)
    with pytest.raises(ContractViolation):
        classifier_loss(clf, x, torch.tensor([1, 2, 3, 4]))
    with pytest.raises(ContractViolation):
        classifier_loss(clf, x, torch.tensor([0, 1, 1, 1]))


@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_finite_differences(seed):
    for image in (False, True):
        assert max(gradients.dm_errors(seed, image)) < gradients.TOLERANCE
        assert max(gradients.de_errors(seed, image)) < gradients.TOLERANCE
    assert gradients.classifier_error(seed) < gradients.TOLERANCE
