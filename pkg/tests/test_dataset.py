import json
import random

import numpy as np
import pytest

from synthcxr.dataset import (
    ClassLabel,
    DatasetManifest,
    ImageRecord,
    IngestError,
    Source,
    Split,
    SplitError,
    ingest_chest_xray_folder,
    ingest_class_folder,
    ingest_rsna,
    stratified_split,
    validate_manifest,
)
from synthcxr.imaging import pixel_hash, read_raster, to_grayscale8


def fake_records(n_per_class, seed=0):
    rng = random.Random(seed)
    out = []
    for label in ClassLabel:
        for i in range(n_per_class):
            digest = rng.getrandbits(256).to_bytes(32, "big")
            out.append(ImageRecord(f"{label.value}-{i:03d}", f"/nowhere/{label.value}/{i}.png", label,
                                   Source.PROCEDURAL_STUB, Split.UNASSIGNED, digest))
    return out


def test_chest_xray_folder_merges_partitions(make_png, tmp_path):
    make_png("cx/train/NORMAL/a.png")
    make_png("cx/val/NORMAL/b.jpeg".replace(".jpeg", ".png"))
    make_png("cx/train/PNEUMONIA/c.png")
    make_png("cx/test/PNEUMONIA/d.png")
    make_png("cx/test/PNEUMONIA/e.png")
    (tmp_path / "cx/test/PNEUMONIA/notes.txt").write_text("ignored")
    m = ingest_chest_xray_folder(tmp_path / "cx")
    assert len(m) == 5
    assert m.class_counts == {ClassLabel.HEALTHY: 2, ClassLabel.PNEUMONIA: 3}
    assert all(r.split is Split.EVAL_EXTERNAL and r.source is Source.CHEST_XRAY_CORPUS for r in m)
    assert m.ids == sorted(m.ids)
    assert dict((r.id, r.label) for r in m)["test/PNEUMONIA/d.png"] is ClassLabel.PNEUMONIA


def test_chest_xray_unreadable_file_is_skipped(make_png, tmp_path):
    make_png("cx/train/NORMAL/a.png")
    make_png("cx/train/PNEUMONIA/b.png")
    bad = tmp_path / "cx/train/PNEUMONIA/broken.jpeg"
    bad.write_bytes(b"not an image")
    m = ingest_chest_xray_folder(tmp_path / "cx")
    assert len(m) == 2
    assert [s[0] for s in m.skipped] == ["train/PNEUMONIA/broken.jpeg"]


def test_chest_xray_empty_and_missing_roots(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(IngestError, match="no records ingested"):
        ingest_chest_xray_folder(tmp_path / "empty")
    with pytest.raises(IngestError, match="does not exist"):
        ingest_chest_xray_folder(tmp_path / "missing")


def write_rsna(tmp_path, make_png, rows, images):
    for rid in images:
        make_png(f"rsna/images/{rid}.png")
    table = tmp_path / "rsna/labels.csv"
    table.write_text("patientId,class\n" + "".join(f"{r},{c}\n" for r, c in rows))
    return tmp_path / "rsna/images", table


def test_rsna_mapping_exclusion_and_dedup(tmp_path, make_png):
    rows = [
        ("p1", "Lung Opacity"),
        ("p1", "Lung Opacity"),  # second bounding box of the same patient
        ("p2", "Normal"),
        ("p3", "No Lung Opacity / Not Normal"),
        ("p4", "Normal"),
        ("p5", "Lung Opacity"),  # no image on disk
    ]
    images_dir, table = write_rsna(tmp_path, make_png, rows, ["p1", "p2", "p3", "p4"])
    m = ingest_rsna(images_dir, table)
    assert m.ids == ["p1", "p2", "p4"]
    assert [r.label for r in m] == [ClassLabel.PNEUMONIA, ClassLabel.HEALTHY, ClassLabel.HEALTHY]
    assert "p3" not in m.ids
    assert m.skipped == (("p5", "no image file"),)
    assert all(r.split is Split.EVAL_EXTERNAL for r in m)
    assert sum(m.class_counts.values()) == len(m)


def test_rsna_unknown_class_is_fatal_and_names_row(tmp_path, make_png):
    images_dir, table = write_rsna(tmp_path, make_png, [("p1", "Normal"), ("p2", "Pleural Effusion")], ["p1", "p2"])
    with pytest.raises(IngestError, match=r"Pleural Effusion.*labels.csv:3"):
        ingest_rsna(images_dir, table)


def test_grayscale_mapping_rescales_and_inverts():
    pixels = np.array([[100, 200], [300, 1100]], dtype=np.uint16)
    mono2 = to_grayscale8(pixels, "MONOCHROME2")
    assert mono2.tolist() == [[0, 26], [51, 255]]
    mono1 = to_grayscale8(pixels, "MONOCHROME1")
    assert (mono1.astype(int) + mono2.astype(int) == 255).all()
    assert to_grayscale8(np.full((3, 3), 7, dtype=np.uint16)).max() == 0


def test_rsna_uses_interchangeable_decoder(tmp_path):
    images = tmp_path / "dcm"
    images.mkdir()
    stored = {}
    for i, rid in enumerate(["a", "b"]):
        (images / f"{rid}.dcm").write_bytes(b"placeholder")
        stored[rid] = np.arange(12, dtype=np.uint16).reshape(3, 4) * (i + 1)
    table = tmp_path / "labels.csv"
    table.write_text("patientId,class\na,Normal\nb,Lung Opacity\n")

    def decoder(path):
        return stored[path.stem], "MONOCHROME1"

    m = ingest_rsna(images, table, decoder=decoder)
    assert m.ids == ["a", "b"]
    expected = to_grayscale8(stored["a"], "MONOCHROME1")
    assert m.records[0].content_hash == pixel_hash(expected)


def test_pydicom_roundtrip(tmp_path):
    pydicom = pytest.importorskip("pydicom")
    from pydicom.dataset import FileDataset, FileMetaDataset
    from pydicom.uid import ExplicitVRLittleEndian, generate_uid

    meta = FileMetaDataset()
    meta.TransferSyntaxUID = ExplicitVRLittleEndian
    meta.MediaStorageSOPClassUID = generate_uid()
    meta.MediaStorageSOPInstanceUID = generate_uid()
    ds = FileDataset(str(tmp_path / "x.dcm"), {}, file_meta=meta, preamble=b"\0" * 128)
    pixels = (np.arange(20, dtype=np.uint16).reshape(4, 5) * 100)
    ds.Rows, ds.Columns = pixels.shape
    ds.SamplesPerPixel = 1
    ds.PhotometricInterpretation = "MONOCHROME1"
    ds.BitsAllocated = ds.BitsStored = 16
    ds.HighBit = 15
    ds.PixelRepresentation = 0
    ds.PixelData = pixels.tobytes()
    ds.save_as(str(tmp_path / "x.dcm"), enforce_file_format=True)
    out = read_raster(tmp_path / "x.dcm")
    assert out.dtype == np.uint8 and out.shape == (4, 5)
    assert out[0, 0] == 255 and out[-1, -1] == 0


def test_split_sizes_and_balance():
    m = DatasetManifest.from_records(fake_records(150))
    s = stratified_split(m, (220, 30, 50), seed=7)
    assert s.split_counts() == {
        "train": {"healthy": 110, "pneumonia": 110},
        "val": {"healthy": 15, "pneumonia": 15},
        "test": {"healthy": 25, "pneumonia": 25},
    }
    assert s.ids == m.ids  # order preserved


def test_split_ignores_input_order():
    records = fake_records(150)
    a = stratified_split(DatasetManifest.from_records(records), (220, 30, 50), seed=7)
    shuffled = records[:]
    random.Random(1).shuffle(shuffled)
    b = stratified_split(DatasetManifest.from_records(shuffled), (220, 30, 50), seed=7)
    assert {r.id: r.split for r in a} == {r.id: r.split for r in b}
    c = stratified_split(DatasetManifest.from_records(records), (220, 30, 50), seed=8)
    assert {r.id: r.split for r in a} != {r.id: r.split for r in c}


def test_split_errors():
    m = DatasetManifest.from_records(fake_records(150))
    with pytest.raises(SplitError, match="sizes do not sum"):
        stratified_split(m, (299, 30, 50), 7)
    with pytest.raises(SplitError, match="infeasible"):
        stratified_split(m, (221, 29, 50), 7)
    lopsided = DatasetManifest.from_records(fake_records(150)[:-2])
    with pytest.raises(SplitError, match="infeasible"):
        stratified_split(lopsided, (218, 30, 50), 7)
    done = stratified_split(m, (220, 30, 50), 7)
    with pytest.raises(SplitError, match="already assigned"):
        stratified_split(done, (220, 30, 50), 7)


def test_validate_manifest(make_png, tmp_path):
    paths = [make_png(f"v/{i}.png") for i in range(3)]
    dup = make_png("v/dup.png", pixels=read_raster(paths[0]))
    recs = [
        ImageRecord(f"r{i}", str(p), ClassLabel.HEALTHY if i % 2 else ClassLabel.PNEUMONIA,
                    Source.PROCEDURAL_STUB, Split.UNASSIGNED, pixel_hash(read_raster(p)))
        for i, p in enumerate(paths)
    ]
    m = DatasetManifest.from_records(recs)
    assert validate_manifest(m).ok

    paths[1].unlink()
    report = validate_manifest(m)
    assert [(i.kind, i.ids) for i in report.issues] == [("missing_file", ("r1",))]

    with_dup = DatasetManifest.from_records(
        recs[:1] + [ImageRecord("copy", str(dup), ClassLabel.HEALTHY, Source.PROCEDURAL_STUB, Split.UNASSIGNED,
                                pixel_hash(read_raster(dup)))])
    issues = validate_manifest(with_dup).of_kind("duplicate_content")
    assert [i.ids for i in issues] == [("r0", "copy")]

    tampered = DatasetManifest(m.records, {ClassLabel.HEALTHY: 5, ClassLabel.PNEUMONIA: 7})
    assert len(validate_manifest(tampered).of_kind("class_count_mismatch")) == 2


def test_manifest_roundtrip_is_identity(make_png, tmp_path):
    paths = [make_png(f"store/{i}.png") for i in range(4)]
    recs = [
        ImageRecord(f"id{i}", str(p.resolve()), list(ClassLabel)[i % 2], Source.NANO_BANANA,
                    [Split.TRAIN, Split.VAL, Split.TEST, Split.UNASSIGNED][i], pixel_hash(read_raster(p)))
        for i, p in enumerate(paths)
    ]
    m = DatasetManifest.from_records(recs, "prov text", 42, [("bad", "unreadable")])
    path = m.save(tmp_path / "manifest.json")
    loaded = DatasetManifest.load(path)
    assert loaded == m
    doc = json.loads(path.read_text())
    assert doc["version"] == 1 and doc["seed"] == 42
    assert doc["records"][0]["path"] == "store/0.png"  # relative to the manifest
    assert doc["records"][0]["content_hash"] == recs[0].content_hash.hex()


def test_class_folder_ingest(make_png, tmp_path):
    make_png("rg/healthy/1.png")
    make_png("rg/pneumonia/2.png")
    make_png("rg/pneumonia/3.png")
    m = ingest_class_folder(tmp_path / "rg", "roentgen_v2")
    assert m.class_counts == {ClassLabel.HEALTHY: 1, ClassLabel.PNEUMONIA: 2}
    assert {r.source for r in m} == {Source.ROENTGEN_V2}
    assert {r.split for r in m} == {Split.UNASSIGNED}
