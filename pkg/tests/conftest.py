import numpy as np
import pytest

from diffreg.dataset import Dataset, GroupDef, Sample, SynthConfig, generate_synthetic


@pytest.fixture
def small_ds():
    cfg = SynthConfig(num_subjects=30, samples_per_subject=3, feature_dim=6, label_range=(20, 40),
                      group_defs=(GroupDef("sex", ("f", "m"), 1.0),), seed=1)
    return generate_synthetic(cfg)


def make_dataset(labels, features, subjects=None, label_min=None, label_max=None):
    features = np.asarray(features, dtype=float)
    if features.ndim == 1:
        features = features[:, None]
    subjects = subjects or [f"subj{i}" for i in range(len(labels))]
    samples = [Sample(f"s{i:04d}", subjects[i], float(a), features[i]) for i, a in enumerate(labels)]
    return Dataset(samples, features.shape[1], label_min, label_max)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one pass/fail line per acceptance criterion for the run summary."""
    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        request.config.stash.setdefault(ACCEPTANCE, []).append((number, line))
        return ok
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
