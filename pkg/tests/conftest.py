import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_data(tmp_path_factory):
    from dmf2mel.data import Dataset, generate_synthetic

    root = tmp_path_factory.mktemp("synthetic")
    generate_synthetic(root, seed=7, n_subjects=4, n_heldout_subjects=2, recording_len_s=60, C=8, M=3)
    return Dataset.load(root)


ACCEPTANCE: list[str] = []


@pytest.fixture
def record_criterion():
    """Collects one pass/fail line per acceptance criterion for the summary."""

    def record(number, ok, detail):
        status = ok if isinstance(ok, str) else ("PASS" if ok else "FAIL")
        line = f"criterion {number:>2}: {status}  {detail}"
        ACCEPTANCE.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
