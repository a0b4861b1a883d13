import numpy as np
import pytest
import torch

from msatl.data import DomainDataset, Sample
from msatl.network import NetConfig, build_model


def make_domain(name, role, n, size=16, seed=0, unlabeled=0, prefix=None):
    """Random images with blob-ish masks; the first `unlabeled` samples lose their labels."""
    rng = np.random.default_rng(seed)
    prefix = prefix or name
    samples = []
    for j in range(n):
        img = rng.random((size, size)).astype(np.float32)
        mask = (rng.random((size, size)) > 0.6).astype(np.uint8)
        samples.append(Sample(f"{prefix}-{j:03d}", img, mask, role.index, labeled=j >= unlabeled))
    return DomainDataset(name, role, tuple(samples))


def tiny_net(n_sources=2, base_width=2, hidden=(8, 4), seed=0, dtype=torch.float64):
    cfg = NetConfig(n_sources=n_sources, base_width=base_width, norm_groups=2, classifier_hidden=hidden)
    return build_model(cfg, seed).to(dtype)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
