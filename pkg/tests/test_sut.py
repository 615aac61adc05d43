import sys

import numpy as np
import pytest

from fusionprobe.errors import NonZeroExit, SutTimeout, UnparsableOutput
from fusionprobe.geometry import Box2, Box3, Pose3, iou_3d
from fusionprobe.insertion import insert_objects
from fusionprobe.mesh import ObjectInstance
from fusionprobe.metrics import FD, LE, OM, Detection, evaluate_frame
from fusionprobe.sut import (BuiltinDetector, BuiltinParams, Dropout, ExternalSut, Inflate, MaxRange,
                             euclidean_clusters, fit_yaw, format_detections, make_injector, parse_detections,
                             stable_hash)
from fusionprobe.synthetic import SceneParams, car_mesh, make_scene, seed_lidar_config


@pytest.fixture(scope="module")
def street():
    return make_scene("s", np.random.default_rng(5), SceneParams(n_cars=(0, 0), road_angle_deg=(0, 0)))


def with_car(scene, x, yaw=0.1):
    inst = ObjectInstance.place(car_mesh(), Pose3(x, scene.road_offset, -1.73, yaw))
    res = insert_objects(scene.frame, [inst], np.random.default_rng(1), lidar_cfg=seed_lidar_config())
    return res.frame, inst


def kinds(frame, dets):
    return sorted(f.kind for f in evaluate_frame(frame.labels, dets).faults)


class TestBuiltin:
    def test_detects_car(self, street):
        frame, inst = with_car(street, 15)
        dets = BuiltinDetector().detect(frame)
        assert len(dets) == 1 and iou_3d(dets[0].box3, inst.box) > 0.7
        assert kinds(frame, dets) == []

    def test_empty_street(self, street):
        assert BuiltinDetector().detect(street.frame) == []

    def test_max_range(self, street):
        near, _ = with_car(street, 15)
        far, _ = with_car(street, 30)
        det = BuiltinDetector(BuiltinParams(faults=[MaxRange(25)]))
        assert kinds(near, det.detect(near)) == []
        assert kinds(far, det.detect(far)) == [OM]

    def test_inflate_gives_localization_error(self, street):
        frame, _ = with_car(street, 15)
        dets = BuiltinDetector(BuiltinParams(faults=[Inflate(1.8)])).detect(frame)
        assert kinds(frame, dets) == [LE]

    def test_dropout_deterministic(self, street):
        frame, _ = with_car(street, 15)
        det = BuiltinDetector(BuiltinParams(faults=[Dropout(0.5)], seed=3))
        assert det.detect(frame) == det.detect(frame)
        assert BuiltinDetector(BuiltinParams(faults=[Dropout(1.0)])).detect(frame) == []

    def test_injector_specs(self):
        assert make_injector({"max_range": 25}) == MaxRange(25.0)
        assert make_injector(Inflate(2.0)) == Inflate(2.0)
        with pytest.raises(ValueError):
            make_injector({"melt": 1})

    def test_clusters(self, rng):
        a = rng.normal([0, 0], 0.2, (50, 2))
        b = rng.normal([10, 0], 0.2, (50, 2))
        lone = np.array([[30.0, 30.0]])
        cl = euclidean_clusters(np.vstack([a, b, lone]), 0.7, 5)
        assert sorted(len(c) for c in cl) == [50, 50]

    @pytest.mark.parametrize("method", ["search", "pca"])
    def test_fit_yaw(self, rng, method):
        yaw = 0.4
        local = rng.uniform([-2, -0.9], [2, 0.9], (400, 2))
        c, s = np.cos(yaw), np.sin(yaw)
        xy = local @ np.array([[c, s], [-s, c]])
        got = fit_yaw(xy, method)
        diff = (got - yaw + np.pi / 2) % np.pi - np.pi / 2
        assert abs(diff) < np.radians(3)

    def test_stable_hash(self):
        assert stable_hash("000001") == stable_hash("000001") != stable_hash("000002")


def stub(tmp_path, body: str) -> str:
    p = tmp_path / "stub.py"
    p.write_text("import sys, pathlib, time\nframe_dir, out_file, fid = sys.argv[1:4]\n" + body)
    return f"{sys.executable} {p} {{frame_dir}} {{out_file}} {{frame_id}}"


ECHO = """lines = pathlib.Path(frame_dir, 'label_2', fid + '.txt').read_text().splitlines()
pathlib.Path(out_file).write_text(''.join(l + ' 0.99\\n' for l in lines))
"""


class TestExternal:
    def test_echo_gt(self, street, tmp_path):
        frame, _ = with_car(street, 15)
        dets = ExternalSut(stub(tmp_path, ECHO)).detect(frame)
        assert len(dets) == 1 and dets[0].score == pytest.approx(0.99)
        assert kinds(frame, dets) == []

    def test_empty_output(self, street, tmp_path):
        frame, _ = with_car(street, 15)
        dets = ExternalSut(stub(tmp_path, "pathlib.Path(out_file).write_text('')\n")).detect(frame)
        assert dets == [] and kinds(frame, dets) == [OM]

    def test_far_box_false_detection(self, street, tmp_path):
        frame, _ = with_car(street, 15)
        far = format_detections([Detection(Box3((40.0, -6.0, -0.98), 4, 1.8, 1.5), None, "Car", 0.9)],
                                frame.calib)
        dets = ExternalSut(stub(tmp_path, f"pathlib.Path(out_file).write_text({far!r})\n")).detect(frame)
        assert kinds(frame, dets) == [FD, OM]

    def test_timeout(self, street, tmp_path):
        sut = ExternalSut(stub(tmp_path, "time.sleep(10)\n"), timeout=0.5)
        with pytest.raises(SutTimeout):
            sut.detect(street.frame)

    def test_nonzero_exit(self, street, tmp_path):
        sut = ExternalSut(stub(tmp_path, "sys.stderr.write('boom'); sys.exit(3)\n"))
        with pytest.raises(NonZeroExit) as e:
            sut.detect(street.frame)
        assert "boom" in e.value.stderr

    def test_unparsable(self, street, tmp_path):
        with pytest.raises(UnparsableOutput):
            ExternalSut(stub(tmp_path, "pathlib.Path(out_file).write_text('Car 1 2\\n')\n")).detect(street.frame)
        with pytest.raises(UnparsableOutput):
            ExternalSut(stub(tmp_path, "pass\n")).detect(street.frame)

    def test_missing_placeholders(self):
        with pytest.raises(ValueError):
            ExternalSut("detector --in x")


class TestFormat:
    def test_round_trip(self, calib, rng):
        dets = []
        for _ in range(10):
            b = Box3((rng.uniform(5, 40), rng.uniform(-8, 8), -0.9), 4.1, 1.7, 1.5, rng.uniform(-3, 3))
            dets.append(Detection(b, Box2(100, 120, 180, 200), "Car", float(rng.uniform(0, 1))))
        back = parse_detections(format_detections(dets, calib), calib)
        assert len(back) == 10
        for a, b in zip(dets, back):
            assert iou_3d(a.box3, b.box3) > 0.99 and abs(a.score - b.score) < 1e-4

    def test_missing_score_rejected(self, calib):
        text = format_detections([Detection(Box3((10.0, 0, -0.9), 4, 1.7, 1.5), None, "Car", 0.5)], calib)
        with pytest.raises(UnparsableOutput):
            parse_detections(" ".join(text.split()[:15]) + "\n", calib)
