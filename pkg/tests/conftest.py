import dataclasses
from pathlib import Path

import pytest

from attnmoa.backends import LengthModel
from attnmoa.config import default_setup
from attnmoa.model import AttentionMode, QueryContext
from attnmoa.pipeline import run

GOLDEN_DIR = Path(__file__).parent / "goldens"

# Shared fixed inputs for golden and structural prompt tests.
HISTORY = (("user", "What is the capital of France?"), ("assistant", "Paris."))
QUERY = "Explain why Paris became the capital of France."


def golden(name: str) -> str:
    """Exact bytes of a checked-in expected rendering, no normalization."""
    return (GOLDEN_DIR / f"{name}.txt").read_bytes().decode("utf-8")


# Unit-test runs use short mock completions; they exercise the same paths as
# the realistic-length acceptance runs but keep the suite fast.
SHORT = LengthModel(mean=40.0, std=8.0)


@pytest.fixture
def run_mock():
    def _run(
        n: int = 3,
        layers: int = 1,
        mode: AttentionMode = AttentionMode.PAIRWISE,
        early_stopping: bool = False,
        seed: int = 0,
        query: str = "What makes a good espresso?",
        mean_tokens: float = SHORT.mean,
        std_tokens: float = SHORT.std,
        caching_enabled: bool = True,
    ):
        setup = default_setup(
            n_collaborators=n,
            layers=layers,
            mode=mode,
            early_stopping=early_stopping,
            seed=seed,
            mean_tokens=mean_tokens,
            std_tokens=std_tokens,
        )
        config = setup.config
        if not caching_enabled:
            config = dataclasses.replace(config, caching_enabled=False)
        return run(QueryContext(query=query), config, setup.backends)

    return _run
