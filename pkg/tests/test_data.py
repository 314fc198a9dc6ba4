import json

import numpy as np
import pytest
from PIL import Image

from ffpf.data import (
    ANNOTATIONS,
    IMAGES,
    SCENE,
    box_area_fractions,
    generate_dataset,
    load_dataset,
    render_scene,
)
from ffpf.exceptions import DatasetError
from ffpf.models import SceneSpec

SMALL = SceneSpec(image_size=32, max_objects=3, max_size=8)


def _files(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestRenderScene:
    def test_boxes_inside_and_disjoint(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            image, boxes = render_scene(SceneSpec(), rng)
            assert image.shape == (64, 64, 3) and image.dtype == np.uint8
            for x1, y1, x2, y2, cls in boxes:
                assert 0 <= x1 < x2 <= 64 and 0 <= y1 < y2 <= 64
                assert 4 <= x2 - x1 <= 10 and 4 <= y2 - y1 <= 10
                assert cls in (0, 1, 2)
            for i, a in enumerate(boxes):
                for b in boxes[i + 1 :]:
                    assert a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1]

    def test_objects_stand_out_from_background(self):
        rng = np.random.default_rng(1)
        spec = SceneSpec(shapes=["square"], min_objects=3, max_objects=3)
        image, boxes = render_scene(spec, rng)
        mask = np.zeros(image.shape[:2], dtype=bool)
        for x1, y1, x2, y2, _ in boxes:
            assert image[y1:y2, x1:x2].min() >= 170
            mask[y1:y2, x1:x2] = True
        assert image[~mask].max() < 170

    def test_exact_object_count(self):
        spec = SceneSpec(min_objects=1, max_objects=1)
        rng = np.random.default_rng(2)
        for _ in range(10):
            _, boxes = render_scene(spec, rng)
            assert len(boxes) == 1

    def test_bar_is_elongated(self):
        spec = SceneSpec(shapes=["bar"], min_objects=1, max_objects=1)
        rng = np.random.default_rng(3)
        for _ in range(10):
            _, boxes = render_scene(spec, rng)
            x1, y1, x2, y2, _ = boxes[0]
            short, long = sorted([x2 - x1, y2 - y1])
            assert short == max(4, long // 2)


class TestGenerateDataset:
    def test_layout(self, tmp_path):
        records = generate_dataset(SMALL, 3, seed=0, out_dir=tmp_path)
        assert [r["image"] for r in records] == ["000000.ppm", "000001.ppm", "000002.ppm"]
        assert (tmp_path / IMAGES / "000002.ppm").exists()
        lines = (tmp_path / ANNOTATIONS).read_text().splitlines()
        assert [json.loads(line) for line in lines] == records
        scene = json.loads((tmp_path / SCENE).read_text())
        assert scene["seed"] == 0 and scene["n_images"] == 3

    def test_byte_identical_across_runs(self, tmp_path):
        generate_dataset(SMALL, 4, seed=7, out_dir=tmp_path / "a")
        generate_dataset(SMALL, 4, seed=7, out_dir=tmp_path / "b")
        assert _files(tmp_path / "a") == _files(tmp_path / "b")

    def test_thread_count_does_not_matter(self, tmp_path, monkeypatch):
        generate_dataset(SMALL, 4, seed=7, out_dir=tmp_path / "serial")
        monkeypatch.setenv("FFPF_THREADS", "3")
        generate_dataset(SMALL, 4, seed=7, out_dir=tmp_path / "threaded")
        assert _files(tmp_path / "serial") == _files(tmp_path / "threaded")

    def test_seeds_differ(self, tmp_path):
        a = generate_dataset(SMALL, 4, seed=0, out_dir=tmp_path / "a")
        b = generate_dataset(SMALL, 4, seed=1, out_dir=tmp_path / "b")
        assert a != b

    def test_non_positive_count(self, tmp_path):
        with pytest.raises(DatasetError, match="positive"):
            generate_dataset(SMALL, 0, seed=0, out_dir=tmp_path)

    def test_unwritable_path(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        with pytest.raises(DatasetError, match="cannot"):
            generate_dataset(SMALL, 1, seed=0, out_dir=blocker / "out")

    def test_area_fractions(self):
        records = [{"boxes": [[0, 0, 4, 4, 0], [0, 0, 8, 2, 1]]}]
        assert box_area_fractions(records, 32).tolist() == [16 / 1024, 16 / 1024]

    @pytest.mark.slow
    def test_ten_thousand_small_objects(self, tmp_path):
        records = generate_dataset(SceneSpec(), 10_000, seed=0, out_dir=tmp_path)
        areas = box_area_fractions(records, 64)
        assert len(areas) >= 10_000
        assert areas.max() < 0.03
        assert all(0 <= b[0] < b[2] <= 64 and 0 <= b[1] < b[3] <= 64 for r in records for b in r["boxes"])


class TestLoadDataset:
    def test_round_trip(self, scene_dir):
        dataset = load_dataset(scene_dir / "train")
        assert len(dataset) == 8
        assert dataset.image_size == (32, 32)
        assert dataset.image_ids([0, 7]) == ["000000", "000007"]
        records = [json.loads(line) for line in (scene_dir / "train" / ANNOTATIONS).read_text().splitlines()]
        gt = dataset.ground_truth()["000000"]
        assert gt.boxes.tolist() == [b[:4] for b in records[0]["boxes"]]
        assert gt.classes.tolist() == [b[4] for b in records[0]["boxes"]]

    def test_batch_normalization(self, scene_dir):
        dataset = load_dataset(scene_dir / "train")
        images, targets = dataset.batch([1, 2])
        assert images.shape == (2, 3, 32, 32)
        assert images.dtype == np.float32
        raw = dataset.records[1].image[0, 0, 0]
        assert images.data[0, 0, 0, 0] == pytest.approx((raw / 255 - 0.5) / 0.25, abs=1e-6)
        assert len(targets) == 2

    def _write(self, root, record, size=32):
        (root / IMAGES).mkdir(parents=True)
        Image.new("RGB", (size, size)).save(root / IMAGES / "000000.ppm", format="PPM")
        (root / ANNOTATIONS).write_text(json.dumps(record) + "\n")

    def test_degenerate_box(self, tmp_path):
        self._write(tmp_path, {"image": "000000.ppm", "boxes": [[4, 4, 4, 9, 0]]})
        with pytest.raises(DatasetError, match="degenerate"):
            load_dataset(tmp_path)

    def test_box_outside_image(self, tmp_path):
        self._write(tmp_path, {"image": "000000.ppm", "boxes": [[20, 20, 40, 30, 0]]})
        with pytest.raises(DatasetError, match="outside"):
            load_dataset(tmp_path)

    def test_missing_image(self, tmp_path):
        self._write(tmp_path, {"image": "000009.ppm", "boxes": []})
        with pytest.raises(DatasetError, match="missing image"):
            load_dataset(tmp_path)

    def test_malformed_record(self, tmp_path):
        self._write(tmp_path, {"boxes": []})
        with pytest.raises(DatasetError, match="malformed"):
            load_dataset(tmp_path)

    def test_missing_annotations(self, tmp_path):
        with pytest.raises(DatasetError, match=ANNOTATIONS):
            load_dataset(tmp_path)

    def test_empty_annotations(self, tmp_path):
        tmp_path.joinpath(ANNOTATIONS).write_text("\n")
        with pytest.raises(DatasetError, match="empty"):
            load_dataset(tmp_path)
