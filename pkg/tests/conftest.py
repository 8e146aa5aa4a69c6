import pytest
import yaml

TINY = {
    "schema_version": 1,
    "seed": 3,
    "methods": ["CAE", "NOISE", "COMBAT", "ADA", "MDADA", "SEADA"],
    "phantom": {
        "shape": [16, 16, 16],
        "domains": [
            {"name": "a", "role": "train", "gain": 0.9, "bias": -0.05, "noise_sigma": 0.01, "blur_sigma": 0.0,
             "counts": {"CN": 8, "AD": 8}},
            {"name": "b", "role": "train", "gain": 1.0, "bias": 0.0, "noise_sigma": 0.02, "blur_sigma": 1.0,
             "counts": {"CN": 8, "AD": 8}},
            {"name": "c", "role": "train", "gain": 1.1, "bias": 0.05, "noise_sigma": 0.03, "blur_sigma": 0.5,
             "counts": {"CN": 8, "AD": 8}},
            {"name": "f", "role": "test", "gain": 1.05, "bias": 0.02, "noise_sigma": 0.02, "blur_sigma": 0.7,
             "counts": {"CN": 6, "AD": 6}},
            {"name": "g", "role": "test", "gain": 0.95, "bias": -0.02, "noise_sigma": 0.01, "blur_sigma": 0.3,
             "counts": {"CN": 6, "AD": 6}},
        ],
    },
    "training": {"defaults": {"epochs": 2, "batch_size": 8}},
    "arch": {"latent_dim": 16, "channels": [4, 8, 8, 8], "style_channels": [4, 4, 8, 8],
             "predictor_hidden": 16, "norm_groups": 4},
}


@pytest.fixture
def tiny_config(tmp_path):
    """Path to a small, fast experiment config (3 training + 2 unseen domains)."""
    p = tmp_path / "tiny.yaml"
    p.write_text(yaml.safe_dump(TINY))
    return p


_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion and assert it."""

    def record(tag: str, ok: bool, detail: str) -> None:
        line = f"{tag} {'PASS' if ok else 'FAIL'}: {detail}"
        _VERDICTS.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[0][2:])):
            terminalreporter.write_line(line)
