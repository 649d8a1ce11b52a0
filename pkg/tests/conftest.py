import numpy as np
import pytest
import torch

from defend.data import build_vocab, generate_synthetic_dataset, training_corpus


def fd_gradcheck(fn, params, eps=1e-5):
    """Norm-wise relative error between autograd and central differences, per parameter."""
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    fn().backward()
    errors = []
    for p in params:
        analytic = p.grad.detach().clone()
        numeric = torch.zeros_like(p)
        flat, nflat = p.data.view(-1), numeric.view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + eps
            with torch.no_grad():
                up = fn().item()
            flat[i] = old - eps
            with torch.no_grad():
                down = fn().item()
            flat[i] = old
            nflat[i] = (up - down) / (2 * eps)
        denom = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
        errors.append((analytic - numeric).norm().item() / denom)
    return max(errors) if errors else 0.0


def fd_directional(fn, params, n_dirs=2, eps=1e-5, seed=0, per_tensor=False, floor=0.0):
    """Like fd_gradcheck but along ``n_dirs`` random unit directions per tensor.

    Central differences along v approximate <grad, v>. The result is the
    norm-wise relative error over every directional derivative, or the worst
    tensor when ``per_tensor`` is set; ``floor`` bounds denominators from below
    so tensors whose gradient is at the roundoff level do not dominate.
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    fn().backward()
    g = torch.Generator().manual_seed(seed)
    errors, all_a, all_n = [], [], []
    for p in params:
        grad = torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
        analytic, numeric = [], []
        for _ in range(n_dirs):
            v = torch.randn(p.shape, generator=g, dtype=p.dtype)
            v /= v.norm()
            old = p.data.clone()
            with torch.no_grad():
                p.data.add_(v, alpha=eps)
                up = fn().item()
                p.data.copy_(old).add_(v, alpha=-eps)
                down = fn().item()
                p.data.copy_(old)
            analytic.append((grad * v).sum().item())
            numeric.append((up - down) / (2 * eps))
        all_a += analytic
        all_n += numeric
        a, n = torch.tensor(analytic), torch.tensor(numeric)
        denom = max(a.norm().item(), n.norm().item(), floor, 1e-12)
        errors.append((a - n).norm().item() / denom)
    if per_tensor:
        return max(errors) if errors else 0.0
    a, n = torch.tensor(all_a), torch.tensor(all_n)
    return (a - n).norm().item() / max(a.norm().item(), n.norm().item(), 1e-12)


def tiny_model(vocab, image_size=16, seed=0, **overrides):
    from defend.encoders import tiny_config
    from defend.model import DefendModel
    torch.manual_seed(seed)
    return DefendModel(tiny_config(image_size=image_size, vocab_size=len(vocab), **overrides))


@pytest.fixture
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


@pytest.fixture(scope="session")
def small_dataset():
    """Tiny 4-class corpus at 16 px for fast model tests."""
    samples, manifest = generate_synthetic_dataset(6, 4, image_size=16, seed=3, patch_size=4)
    by_id = {s.record.image_id: s for s in samples}
    train = [by_id[i] for i in manifest.train]
    vocab = build_vocab(training_corpus(train))
    return samples, manifest, train, vocab


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# criterion number -> (passed, detail); filled by test_acceptance, printed after the run
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (len(str(k)), str(k))):
        ok, detail = ACCEPTANCE[key]
        status = "PASS" if ok else ("INFO" if ok is None else "FAIL")
        terminalreporter.write_line(f"{status} {key}: {detail}")
