import sys

import numpy as np
import pytest
import torch

from stdaseg.ddm import DomainDisentangledModule


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_ddm(c, reduction=4, seed=0, dtype=torch.float64):
    torch.manual_seed(seed)
    m = DomainDisentangledModule(c, reduction).to(dtype)
    # spread the parameters so gates and masks are not all near-uniform
    with torch.no_grad():
        for p in m.parameters():
            p.mul_(2.0)
    return m


def params_np(module):
    return {k: v.detach().cpu().numpy().astype(np.float64) for k, v in module.state_dict().items()}


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
