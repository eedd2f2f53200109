"""Extractor end-to-end with the deterministic stub encoder.

Format conformance is checked by reading the emitted files back with the
inference engine's own reader (the only contract between the two packages).
"""

import numpy as np
import numpy.testing as npt
import pytest
from PIL import Image

import piaa.store as store
from piaa_extractor import ExtractError, ExtractJob, ToyEncoder, extract
from piaa_extractor.cli import main
from piaa_extractor.encoders import GRID, IMAGE_SIZE, PATCH_SIZE


def paint(path, color, size=(200, 160)):
    img = Image.new("RGB", size, color)
    px = img.load()
    for x in range(size[0]):                 # gradient so cells differ
        for y in range(0, size[1], 7):
            px[x, y] = (x % 256, color[1], y % 256)
    img.save(path)


@pytest.fixture()
def image_dir(tmp_path):
    root = tmp_path / "imgs"
    (root / "sub").mkdir(parents=True)
    paint(root / "a.png", (200, 30, 30))
    paint(root / "b.png", (30, 200, 30))
    paint(root / "sub" / "c.jpg", (30, 30, 200))
    paint(root / "dup.png", (200, 30, 30))   # same pattern as a.png
    (root / "broken.png").write_bytes(b"not an image at all")
    return root


def job_for(image_dir, tmp_path, **kw):
    defaults = dict(
        image_root=image_dir,
        class_names=["cat", "dog", "tree"],
        output_embeddings=tmp_path / "out" / "emb.piaa",
        output_prototypes=tmp_path / "out" / "protos.piaa",
        encoder_id="toy:48",
        batch_size=2,
    )
    defaults.update(kw)
    return ExtractJob(**defaults)


class TestGeometry:
    def test_vit_b16_grid_arithmetic(self):
        assert (IMAGE_SIZE // PATCH_SIZE) ** 2 == 196
        assert ToyEncoder(dim=32).patches_per_image == GRID * GRID == 196


class TestExtract:
    def test_emits_files_the_engine_can_read(self, image_dir, tmp_path):
        job = job_for(image_dir, tmp_path)
        result = extract(job)
        assert result.num_images == 4
        assert result.num_skipped == 1

        es = store.read_embedding_file(job.output_embeddings)
        assert es.num_images == 4
        assert es.dim == 48
        assert np.all(es.patch_counts() == 196)
        raw_norms = np.linalg.norm(es.patches.astype(np.float64), axis=1)
        assert np.abs(raw_norms - 1.0).max() <= 1e-4   # no re-normalization drift
        assert "sub/c.jpg" in es.image_ids

        tp = store.read_text_prototypes(job.output_prototypes)
        assert tp.class_names == ("cat", "dog", "tree")
        assert tp.dim == 48

    def test_identical_images_get_identical_rows(self, image_dir, tmp_path):
        job = job_for(image_dir, tmp_path)
        extract(job)
        es = store.read_embedding_file(job.output_embeddings)
        ids = list(es.image_ids)
        a, dup = ids.index("a.png"), ids.index("dup.png")
        npt.assert_array_equal(es.image_patches(a), es.image_patches(dup))
        npt.assert_array_equal(es.cls[a], es.cls[dup])

    def test_skip_log_records_undecodable_images(self, image_dir, tmp_path):
        job = job_for(image_dir, tmp_path)
        extract(job)
        import json
        records = [json.loads(s) for s in
                   job.resolved_skip_log().read_text().splitlines()]
        assert [r["path"] for r in records] == ["broken.png"]

    def test_zero_usable_images_is_an_error(self, tmp_path):
        empty = tmp_path / "none"
        empty.mkdir()
        (empty / "junk.png").write_bytes(b"garbage")
        with pytest.raises(ExtractError, match="no usable images"):
            extract(job_for(empty, tmp_path))

    def test_runs_are_byte_deterministic(self, image_dir, tmp_path):
        j1 = job_for(image_dir, tmp_path)
        extract(j1)
        j2 = job_for(image_dir, tmp_path,
                     output_embeddings=tmp_path / "out2" / "emb.piaa",
                     output_prototypes=tmp_path / "out2" / "protos.piaa")
        extract(j2)
        assert j1.output_embeddings.read_bytes() == j2.output_embeddings.read_bytes()
        assert j1.output_prototypes.read_bytes() == j2.output_prototypes.read_bytes()

    def test_prompt_template_changes_prototypes(self, image_dir, tmp_path):
        j1 = job_for(image_dir, tmp_path)
        extract(j1)
        j2 = job_for(image_dir, tmp_path,
                     prompt_template="a bad photo of the {}",
                     output_embeddings=tmp_path / "t2" / "emb.piaa",
                     output_prototypes=tmp_path / "t2" / "protos.piaa")
        extract(j2)
        a = store.read_text_prototypes(j1.output_prototypes).prototypes
        b = store.read_text_prototypes(j2.output_prototypes).prototypes
        assert not np.array_equal(a, b)

    def test_template_ensembling_averages_prototypes(self, image_dir, tmp_path):
        single = job_for(image_dir, tmp_path)
        extract(single)
        ens = job_for(image_dir, tmp_path,
                      ensemble_templates=("a bad photo of the {}", "art of a {}"),
                      output_embeddings=tmp_path / "ens" / "emb.piaa",
                      output_prototypes=tmp_path / "ens" / "protos.piaa")
        extract(ens)
        a = store.read_text_prototypes(single.output_prototypes).prototypes
        b = store.read_text_prototypes(ens.output_prototypes).prototypes
        assert not np.array_equal(a, b)
        npt.assert_allclose(np.linalg.norm(b.astype(np.float64), axis=1), 1.0, atol=1e-6)

    def test_batching_does_not_change_output(self, image_dir, tmp_path):
        j1 = job_for(image_dir, tmp_path, batch_size=1)
        extract(j1)
        j2 = job_for(image_dir, tmp_path, batch_size=64,
                     output_embeddings=tmp_path / "b2" / "emb.piaa",
                     output_prototypes=tmp_path / "b2" / "protos.piaa")
        extract(j2)
        assert j1.output_embeddings.read_bytes() == j2.output_embeddings.read_bytes()


class TestEndToEndWithEngine:
    def test_engine_pipeline_consumes_extracted_files(self, image_dir, tmp_path):
        job = job_for(image_dir, tmp_path)
        extract(job)
        es = store.read_embedding_file(job.output_embeddings)
        tp = store.read_text_prototypes(job.output_prototypes)
        from piaa.pvcl import run_pvcl
        clf, report = run_pvcl(es, tp, k=100)
        assert clf.num_classes == 3
        assert sum(report.bootstrap_sizes) > 0


class TestCli:
    def test_happy_path(self, image_dir, tmp_path, capsys):
        rc = main(["--images", str(image_dir), "--class-names", "cat,dog,tree",
                   "--encoder", "toy:32",
                   "--out-embeddings", str(tmp_path / "e.piaa"),
                   "--out-prototypes", str(tmp_path / "p.piaa")])
        assert rc == 0
        assert "encoded 4 images (1 skipped)" in capsys.readouterr().out
        assert store.read_embedding_file(tmp_path / "e.piaa").dim == 32

    def test_class_names_file(self, image_dir, tmp_path):
        names = tmp_path / "names.txt"
        names.write_text("cat\ndog\n")
        rc = main(["--images", str(image_dir), "--class-names", str(names),
                   "--encoder", "toy:32",
                   "--out-embeddings", str(tmp_path / "e.piaa"),
                   "--out-prototypes", str(tmp_path / "p.piaa")])
        assert rc == 0
        tp = store.read_text_prototypes(tmp_path / "p.piaa")
        assert tp.class_names == ("cat", "dog")

    def test_missing_folder_exits_1(self, tmp_path, capsys):
        rc = main(["--images", str(tmp_path / "nope"), "--class-names", "x",
                   "--encoder", "toy:32",
                   "--out-embeddings", str(tmp_path / "e.piaa"),
                   "--out-prototypes", str(tmp_path / "p.piaa")])
        assert rc == 1
