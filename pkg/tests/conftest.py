import numpy as np
import pytest
import torch

from dail.contexts import ExpertSolution, ProblemInstance, default_templates
from dail.model import ModelConfig, init_adapter, init_params
from dail.synthetic import compress_solution, generate_problem

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def templates():
    return default_templates()


@pytest.fixture(scope="session")
def vocab(templates):
    return templates.vocab


@pytest.fixture(scope="session")
def tiny_config(vocab):
    return ModelConfig(len(vocab), embed_dim=16, layers=1, heads=2, context_len=512, positional="rotary")


@pytest.fixture(scope="session")
def tiny_params(tiny_config):
    return init_params(tiny_config, seed=3)


@pytest.fixture(scope="session")
def tiny_check_params(tiny_params):
    return tiny_params.to_precision("check")


def perturbed_adapter(params, seed=0, scale=0.05):
    """Adapter with nonzero B so gradients through A are exercised."""
    ad = init_adapter(params, rank=4, seed=seed)
    gen = torch.Generator().manual_seed(seed + 1)
    factors = {k: (a, torch.randn(b.shape, generator=gen, dtype=torch.float64).to(b.dtype) * scale)
               for k, (a, b) in ad.factors.items()}
    return type(ad)(ad.rank, ad.alpha, factors)


@pytest.fixture(scope="session")
def chain_item():
    problem, trace = generate_problem(11, 4, "t11")
    comp = compress_solution(trace, 0.7, 11)
    return problem, trace, comp, problem.instance(), comp.expert()


@pytest.fixture(scope="session")
def simple_instance():
    return ProblemInstance("p1", "417+5-3", "419"), ExpertSolution("+5=422;-3=419;</think>\\boxed{419}")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# --------------------------------------------------------------------------
# acceptance summary: one line per criterion marker

_VERDICTS: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    number, title = mark.args
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed and not detail:
        detail = str(rep.longrepr).strip().splitlines()[-1][:160]
    _VERDICTS[number] = ("PASS" if rep.passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        verdict, title, detail = _VERDICTS[number]
        terminalreporter.write_line(f"criterion {number:2d} {verdict}  {title}  [{detail}]")
