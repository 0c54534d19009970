import time

import pytest

from sidreid.config import desk_config
from sidreid.schema import builtin_schema
from sidreid.synthetic import SyntheticSpec, generate_synthetic
from sidreid.workbench import Trainer, evaluate


@pytest.fixture(scope="session")
def synth_schema():
    return builtin_schema("synthetic")


@pytest.fixture(scope="session")
def small_splits(synth_schema):
    spec = SyntheticSpec(num_train_persons=12, num_test_persons=6, train_images_per_person=4, gallery_per_person=3)
    return generate_synthetic(spec, synth_schema, seed=3)


def tiny_config(**overrides):
    """A few-second run on a small synthetic set."""
    base = {
        "data.synthetic.num_train_persons": 12,
        "data.synthetic.num_test_persons": 6,
        "data.synthetic.train_images_per_person": 4,
        "data.synthetic.gallery_per_person": 3,
        "sampler.persons_per_batch": 4,
        "sampler.images_per_person": 2,
        "optim.iterations": 20,
        "optim.warmup_iterations": 5,
        "log_every": 0,
    }
    base.update(overrides)
    return desk_config(**base)


class DeskRun:
    """The shipped synthetic configuration trained once per test session."""

    def __init__(self, tmp_dir):
        start = time.perf_counter()
        self.cfg = desk_config(log_every=0)
        self.trainer = Trainer(self.cfg)
        self.initial = evaluate(self.trainer.model, self.trainer.splits, self.trainer.schema,
                                protocol_filter=self.cfg.eval_protocol_filter)
        self.trainer.run()
        self.final = evaluate(self.trainer.model, self.trainer.splits, self.trainer.schema,
                              protocol_filter=self.cfg.eval_protocol_filter)
        self.seconds = time.perf_counter() - start
        self.checkpoint = self.trainer.save(tmp_dir / "desk.pt")


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    return DeskRun(tmp_path_factory.mktemp("desk"))


# acceptance reporting ---------------------------------------------------------

CRITERIA: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion():
    """Record one acceptance line and fail the test when the check does not hold."""

    def check(name: str, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        CRITERIA.append((name, ok, detail))
        print(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in CRITERIA:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
