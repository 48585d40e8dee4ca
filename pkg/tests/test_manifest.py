from __future__ import annotations

import numpy as np
import pytest
import torch

from fsdg.errors import ManifestError
from fsdg.manifest import file_hash, load_images, load_manifest, write_dataset
from fsdg.synthdata import STUDIO, FIELD, SynthSpec, generate


@pytest.fixture(scope="module")
def written_benchmark(tmp_path_factory):
    spec = SynthSpec(
        classes_per_level=(4, 2), samples_per_class=2,
        domains=(STUDIO, FIELD), seed=9,
    )
    datasets, hierarchy = generate(spec)
    out = tmp_path_factory.mktemp("bench")
    manifest_path = write_dataset(datasets, hierarchy, out)
    return datasets, hierarchy, manifest_path


def test_write_then_load_round_trip(written_benchmark):
    datasets, hierarchy, manifest_path = written_benchmark
    manifest = load_manifest(manifest_path)
    assert manifest.domains == ("studio", "field")
    assert tuple(manifest.hierarchy.classes_per_level) == (4, 2)
    assert len(manifest.records) == 16

    loaded = load_images(manifest, "studio")
    original = datasets["studio"]
    assert torch.equal(loaded.labels, original.labels)
    # PNG quantization changes values by at most half a step
    assert float((loaded.images - original.images).abs().max()) <= (0.5 / 255) + 1e-6


def test_manifest_rows_are_hierarchy_consistent(written_benchmark):
    _, hierarchy, manifest_path = written_benchmark
    manifest = load_manifest(manifest_path)
    for record in manifest.records:
        assert record.labels == tuple(hierarchy.class_vector(record.labels[0]))


def test_load_images_unknown_domain(written_benchmark):
    _, _, manifest_path = written_benchmark
    manifest = load_manifest(manifest_path)
    with pytest.raises(ManifestError):
        load_images(manifest, "night")


def _write(path, text):
    path.write_text(text)
    return path


HIERARCHY_FILE = "#levels 2\n#order fine_to_coarse\n0 0\n1 0\n2 1\n3 1\n"


def test_missing_hierarchy_pragma(tmp_path):
    _write(tmp_path / "h.txt", HIERARCHY_FILE)
    m = _write(tmp_path / "m.csv", "path,domain,y0,y1\na.png,studio,0,0\n")
    with pytest.raises(ManifestError, match="hierarchy"):
        load_manifest(m)


def test_wrong_header(tmp_path):
    _write(tmp_path / "h.txt", HIERARCHY_FILE)
    m = _write(tmp_path / "m.csv",
               "#hierarchy=h.txt\npath,domain,y1,y0\na.png,studio,0,0\n")
    with pytest.raises(ManifestError, match="header"):
        load_manifest(m)


def test_row_with_wrong_cell_count(tmp_path):
    _write(tmp_path / "h.txt", HIERARCHY_FILE)
    m = _write(tmp_path / "m.csv",
               "#hierarchy=h.txt\npath,domain,y0,y1\na.png,studio,0\n")
    with pytest.raises(ManifestError, match="row 2"):
        load_manifest(m)


def test_non_integer_labels(tmp_path):
    _write(tmp_path / "h.txt", HIERARCHY_FILE)
    m = _write(tmp_path / "m.csv",
               "#hierarchy=h.txt\npath,domain,y0,y1\na.png,studio,zero,0\n")
    with pytest.raises(ManifestError, match="non-integer"):
        load_manifest(m)


def test_fine_label_out_of_range(tmp_path):
    _write(tmp_path / "h.txt", HIERARCHY_FILE)
    m = _write(tmp_path / "m.csv",
               "#hierarchy=h.txt\npath,domain,y0,y1\na.png,studio,7,0\n")
    with pytest.raises(ManifestError, match="out of range"):
        load_manifest(m)


def test_labels_contradicting_hierarchy(tmp_path):
    _write(tmp_path / "h.txt", HIERARCHY_FILE)
    m = _write(tmp_path / "m.csv",
               "#hierarchy=h.txt\npath,domain,y0,y1\na.png,studio,0,1\n")
    with pytest.raises(ManifestError, match="contradict"):
        load_manifest(m)


def test_empty_manifest(tmp_path):
    _write(tmp_path / "h.txt", HIERARCHY_FILE)
    m = _write(tmp_path / "m.csv", "#hierarchy=h.txt\npath,domain,y0,y1\n")
    with pytest.raises(ManifestError, match="no sample rows"):
        load_manifest(m)


def test_comments_and_blank_lines_are_skipped(tmp_path):
    _write(tmp_path / "h.txt", HIERARCHY_FILE)
    m = _write(
        tmp_path / "m.csv",
        "# a note\n#hierarchy=h.txt\n\npath,domain,y0,y1\n# another\na.png,studio,0,0\n",
    )
    manifest = load_manifest(m)
    assert len(manifest.records) == 1
    assert manifest.records[0].domain == "studio"


def test_file_hash_tracks_content(tmp_path):
    a = _write(tmp_path / "a", "alpha")
    b = _write(tmp_path / "b", "alpha")
    c = _write(tmp_path / "c", "beta")
    assert file_hash(a) == file_hash(b)
    assert file_hash(a) != file_hash(c)
    assert len(file_hash(a)) == 64
