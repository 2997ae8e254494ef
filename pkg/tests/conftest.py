import numpy as np
import pytest

from synthcxr.imaging import write_png


@pytest.fixture
def make_png(tmp_path):
    """Write a uint8 raster under tmp_path and return its path."""

    def _make(rel, pixels=None, value=None, shape=(12, 10)):
        if pixels is None:
            if value is None:
                rng = np.random.default_rng(abs(hash(rel)) % 2**32)
                pixels = rng.integers(0, 256, size=shape, dtype=np.uint8)
            else:
                pixels = np.full(shape, value, dtype=np.uint8)
        return write_png(pixels, tmp_path / rel)

    return _make


def toy_image(positive, rng, shape=(64, 48)):
    """Noisy field of random brightness; positives carry one bright square blob at a random spot.

    The background level varies enough that overall brightness alone does not
    separate the classes; the blob's local contrast does.
    """
    img = rng.normal(rng.uniform(40, 140), 8, size=shape)
    if positive:
        h, w = shape
        r = max(3, min(h, w) // 6)
        cy, cx = rng.integers(r, h - r), rng.integers(r, w - r)
        img[cy - r : cy + r, cx - r : cx + r] += 90
    return np.clip(img, 0, 255).astype(np.uint8)


@pytest.fixture
def toy_manifest(tmp_path):
    """Build a manifest of toy images on disk: toy_manifest(n_per_class, seed, split)."""
    from synthcxr.dataset import ClassLabel, DatasetManifest, ImageRecord, Source, Split
    from synthcxr.imaging import pixel_hash

    def _make(n_per_class, seed=0, split="train", shape=(64, 48)):
        rng = np.random.default_rng(seed)
        records = []
        for label in ClassLabel:
            for i in range(n_per_class):
                pixels = toy_image(label is ClassLabel.PNEUMONIA, rng, shape)
                rid = f"{split}-{label.value}-{seed}-{i}"
                path = write_png(pixels, tmp_path / "toy" / f"{rid}.png")
                records.append(ImageRecord(rid, str(path), label, Source.PROCEDURAL_STUB, Split(split),
                                           pixel_hash(pixels)))
        return DatasetManifest.from_records(records, f"toy seed={seed}", seed)

    return _make


# --- acceptance criteria summary -------------------------------------------------

_ACCEPTANCE = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, name = marker.args[0], marker.args[1] if len(marker.args) > 1 else ""
    if rep.when == "call" or rep.outcome != "passed":
        reason = ""
        if rep.skipped and isinstance(rep.longrepr, tuple):
            reason = rep.longrepr[2].removeprefix("Skipped: ")
        _ACCEPTANCE.setdefault(number, {"name": name, "parts": []})["parts"].append((item.name, rep.outcome, reason))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        entry = _ACCEPTANCE[number]
        outcomes = [o for _, o, _ in entry["parts"]]
        if "failed" in outcomes:
            verdict = "FAIL"
        elif "passed" in outcomes:
            verdict = "PASS"
        else:
            verdict = "SKIP"
        skipped = [f"{n}: {r}" for n, o, r in entry["parts"] if o == "skipped"]
        note = f"  [skipped part(s) -> {'; '.join(skipped)}]" if skipped else ""
        tr.write_line(f"criterion {number:>2} {verdict:4}  {entry['name']}{note}")
