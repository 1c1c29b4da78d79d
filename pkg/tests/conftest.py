import pytest

from flowinvert.model import FlowSizeModel

REFERENCE_LAW = dict(r=0.75, b0=20, head_mass=0.983, shapes=(0.52, 1.81), breaks=(3000,))


@pytest.fixture
def reference_model() -> FlowSizeModel:
    """Geometric head below 20 packets, shape 0.52 up to a knee at 3000, then 1.81."""
    return FlowSizeModel.from_shapes(**REFERENCE_LAW)


# Pre-committed end-to-end fixture: reference law, 5e5 flows, 1-in-100
# sampling over a shuffled stream, seed 1 for both the sizes and the shuffle.
E2E_FLOWS = 500_000
E2E_K = 100
E2E_SEED = 1


@pytest.fixture(scope="session")
def e2e_run():
    from flowinvert.aggregate import FlowHistogram
    from flowinvert.inversion import InversionConfig, invert
    from flowinvert.model import draw_flow_sizes
    from flowinvert.synth import SamplingConfig, deterministic_sample, interleave, sampled_counts

    model = FlowSizeModel.from_shapes(**REFERENCE_LAW)
    sizes = draw_flow_sizes(model, E2E_FLOWS, E2E_SEED)
    stream = interleave(sizes, "shuffle", E2E_SEED)
    counts = sampled_counts(deterministic_sample(stream, SamplingConfig(E2E_K)), E2E_FLOWS)
    hist = FlowHistogram.from_sizes(counts)
    report = invert(hist, InversionConfig(E2E_K, refine="forward"))
    stepwise = invert(hist, InversionConfig(E2E_K))
    return dict(model=model, sizes=sizes, hist=hist, report=report, stepwise=stepwise,
                K=E2E_FLOWS, k=E2E_K, big=int((sizes >= model.b0).sum()))


# -- acceptance summary ---------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}" + (f" -- {detail}" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
