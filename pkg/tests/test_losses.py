import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from omnidet.losses import (
    BranchLoss, LossConfig, dla_loss, focal_certain, focal_neg, focal_pos, giou_loss, giou_rows,
    hla_loss, sla_loss, total_loss, uncertain_loss,
)

from oracles import FD_RTOL, central_fd, gradient_cases, rel_err


@pytest.mark.parametrize("case", list(gradient_cases(n=100)), ids=lambda c: c[0])
def test_gradients_match_finite_differences(case):
    name, f, x, analytic = case
    x = x.clone().requires_grad_(True)
    f(x).backward()
    fd = central_fd(f, x.detach().clone())
    assert rel_err(x.grad, fd) < FD_RTOL
    if analytic is not None:
        assert rel_err(analytic, fd) < FD_RTOL


def test_focal_values():
    P = torch.tensor([0.5], dtype=torch.float64)
    assert focal_pos(P, 2.0).item() == pytest.approx(0.25 * math.log(2))
    assert focal_neg(P, 0.0).item() == pytest.approx(math.log(2))


def test_clamping_keeps_losses_finite():
    P = torch.tensor([0.0, 1.0, 0.5])
    W = torch.tensor([1.0, 0.0, 0.5])
    for v in (dla_loss(P, W), sla_loss(P, W), hla_loss(P, W),
              focal_certain(P, torch.tensor([1, 1, 0], dtype=torch.bool), torch.tensor([0, 0, 1], dtype=torch.bool))):
        assert torch.isfinite(v) and v >= 0


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_dla_nonnegative(p, w):
    v = dla_loss(torch.tensor([p], dtype=torch.float64), torch.tensor([w], dtype=torch.float64))
    assert math.isfinite(v.item()) and v.item() >= 0


def test_hla_threshold_is_inclusive():
    P = torch.tensor([0.3], dtype=torch.float64)
    assert hla_loss(P, torch.tensor([0.5], dtype=torch.float64)).item() == pytest.approx(focal_pos(P, 2).item())
    assert hla_loss(P, torch.tensor([0.49], dtype=torch.float64)).item() == pytest.approx(focal_neg(P, 2).item())


def test_weights_receive_no_gradient():
    P = torch.rand(10, dtype=torch.float64, requires_grad=True)
    W = torch.rand(10, dtype=torch.float64, requires_grad=True)
    (dla_loss(P, W) + sla_loss(P, W)).backward()
    assert W.grad is None and P.grad is not None


def test_dla_pulls_toward_weight():
    # at a fixed W the minimizer over P moves with W
    grid = torch.linspace(0.01, 0.99, 981, dtype=torch.float64)
    argmins = [grid[torch.stack([dla_loss(p[None], torch.tensor([w], dtype=torch.float64)) for p in grid]).argmin()]
               for w in (0.2, 0.5, 0.8)]
    assert argmins[0] < argmins[1] < argmins[2]
    assert argmins[1].item() == pytest.approx(0.5, abs=0.01)


class TestWeightsOutsideLog:
    def test_value(self):
        P = torch.tensor([0.9], dtype=torch.float64)
        W = torch.tensor([0.7], dtype=torch.float64)
        # 0.49 * 0.01 * -ln 0.9 + 0.09 * 0.81 * -ln 0.1
        want = 0.49 * 0.01 * -math.log(0.9) + 0.09 * 0.81 * -math.log(0.1)
        assert dla_loss(P, W, in_log=False).item() == pytest.approx(want, rel=1e-12)

    def test_extreme_weights_reduce_to_focal(self):
        P = torch.linspace(0.05, 0.95, 19, dtype=torch.float64)
        one, zero = torch.ones_like(P), torch.zeros_like(P)
        assert dla_loss(P, one, eps=1e-12, in_log=False).item() == pytest.approx(focal_pos(P, 2).sum().item())
        assert dla_loss(P, zero, eps=1e-12, in_log=False).item() == pytest.approx(focal_neg(P, 2).sum().item())

    def test_config_routes_flag(self):
        P, W = torch.tensor([0.4]), torch.tensor([0.3])
        cfg = LossConfig(strategy="DLA", weights_in_log=False)
        assert uncertain_loss(P, W, cfg).item() == pytest.approx(dla_loss(P, W, in_log=False).item())
        assert uncertain_loss(P, W, cfg).item() != pytest.approx(dla_loss(P, W).item())


def test_overlapping_certain_masks():
    m = torch.tensor([True])
    with pytest.raises(ValueError):
        focal_certain(torch.tensor([0.5]), m, m)


class TestGIoU:
    def test_perfect_prediction(self):
        pts = torch.tensor([[10.0, 10.0]])
        gt = torch.tensor([[5.0, 6.0, 14.0, 18.0]])
        dist = torch.tensor([[5.0, 4.0, 4.0, 8.0]])
        assert giou_loss(dist, pts, gt).item() == pytest.approx(0.0, abs=1e-6)

    def test_known_value(self):
        v = giou_rows(torch.tensor([[0.0, 0, 2, 2]]), torch.tensor([[1.0, 1, 3, 3]]))
        assert v.item() == pytest.approx(-5 / 63)

    def test_empty(self):
        assert giou_loss(torch.zeros(0, 4), torch.zeros(0, 2), torch.zeros(0, 4)).item() == 0.0

    def test_disjoint_has_gradient(self):
        d = torch.tensor([[1.0, 1.0, 1.0, 1.0]], requires_grad=True)
        giou_loss(d, torch.tensor([[0.0, 0.0]]), torch.tensor([[10.0, 10.0, 12.0, 12.0]])).backward()
        assert d.grad.abs().sum() > 0


class TestRouting:
    def parts(self):
        one = torch.tensor(1.0)
        return {b: BranchLoss(one * 1, one * 2, one * 4) for b in ("box", "mask", "dot", "unlabeled")}

    def test_branch_terms(self):
        rep = total_loss(self.parts(), delta=0.5)
        # box 7, mask 7, dot 3, unlabeled 0.5 * 2
        assert rep.total.item() == pytest.approx(18.0)
        assert rep.components["dot"]["regression"] == 0.0

    def test_delta_zero_silences_unlabeled(self):
        parts = {"unlabeled": BranchLoss(torch.tensor(0.0), torch.tensor(3.0))}
        assert total_loss(parts, delta=0.0).total.item() == 0.0

    def test_unknown_branch(self):
        with pytest.raises(ValueError):
            total_loss({"other": BranchLoss(torch.tensor(0.0), torch.tensor(0.0))})


def test_config_validation():
    with pytest.raises(ValueError):
        LossConfig(strategy="XYZ")
    with pytest.raises(ValueError):
        LossConfig(t=1.0)
    assert LossConfig(strategy="dla").strategy == "DLA"
    with pytest.raises(ValueError):
        uncertain_loss(torch.zeros(1), torch.zeros(1), LossConfig(strategy="FIXED"))
