import numpy as np
import pytest

from unlearnprobe.optim import AdamW, MultiStepSchedule, decay_milestones

torch = pytest.importorskip("torch")


def test_adamw_matches_torch_reference():
    rng = np.random.default_rng(0)
    p0 = rng.standard_normal(5)
    grads = rng.standard_normal((20, 5))
    mine = p0.copy()
    opt = AdamW([mine], lr=0.01, weight_decay=0.01)
    ref = torch.tensor(p0, requires_grad=True)
    topt = torch.optim.AdamW([ref], lr=0.01, weight_decay=0.01)
    for g in grads:
        opt.step([g])
        ref.grad = torch.tensor(g)
        topt.step()
    np.testing.assert_allclose(mine, ref.detach().numpy(), rtol=1e-12, atol=1e-14)


def test_schedule_matches_torch_multistep():
    ms = decay_milestones(80)
    opt = AdamW([np.zeros(1)], lr=0.01)
    sched = MultiStepSchedule(opt, ms, 0.5)
    ref = torch.optim.SGD([torch.zeros(1, requires_grad=True)], lr=0.01)
    tsched = torch.optim.lr_scheduler.MultiStepLR(ref, ms, 0.5)
    for _ in range(80):
        sched.step()
        ref.step()
        tsched.step()
        assert opt.lr == pytest.approx(ref.param_groups[0]["lr"])


def test_milestones_for_default_budget():
    assert decay_milestones(10000) == [3750, 6250, 8750]


def test_invalid_factor_rejected():
    with pytest.raises(ValueError):
        MultiStepSchedule(AdamW([np.zeros(1)]), [1], 1.0)
