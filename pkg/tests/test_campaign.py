import json
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import pytest
import yaml

from fusionprobe import cli
from fusionprobe.campaign import fold_totals, run_campaign, substream
from fusionprobe.config import CampaignConfig, config_from_dict, config_to_dict, load_config
from fusionprobe.errors import ConfigError, SutFailure
from fusionprobe.geometry import Box3, Pose3, iou_3d
from fusionprobe.kitti_io import list_frame_ids, load_frame
from fusionprobe.mesh import load_object_database, mesh_bounds
from fusionprobe.metrics import Detection
from fusionprobe.sut import format_detections

SCHEMA = json.loads(resources.files("fusionprobe").joinpath("schemas/manifest.schema.json").read_text())


def cfg_for(root, out, **kw):
    return config_from_dict({"seeds_dir": str(root / "seeds"), "objects_dir": str(root / "objects"),
                             "output_dir": str(out), **kw})


@pytest.fixture(scope="module")
def guided(small_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("guided")
    cfg = cfg_for(small_dataset, out, sut={"params": {"faults": [{"max_range": 25}]}})
    return cfg, run_campaign(cfg)


def box3_of(d):
    return Box3(tuple(d["center"]), d["length"], d["width"], d["height"], d["yaw"])


class TestConfig:
    def test_defaults(self):
        c = CampaignConfig()
        assert (c.n_insertions, c.try_num, c.guidance, c.tau) == (3, 5, "guided", 0.5)
        assert (c.fitness.alpha, c.fitness.beta, c.fitness.gamma, c.fitness.dis_max) == (0.5, 0.25, 0.25, 80.0)

    def test_yaml_and_overrides(self, tmp_path):
        (tmp_path / "c.yaml").write_text(yaml.safe_dump({"seeds_dir": "s", "pose": {"dis_max": 50},
                                                         "lidar": {"horizontal_fov": [-45, 45]}}))
        c = load_config(tmp_path / "c.yaml", ["try_num=7", "sut.params.faults=[{max_range: 25}]",
                                              "fitness.dis_max=60"])
        assert c.seeds_dir == str(tmp_path / "s") and c.try_num == 7
        assert c.pose.dis_max == 50 and c.lidar.horizontal_fov == (-45, 45) and c.fitness.dis_max == 60
        assert c.sut.params["faults"] == [{"max_range": 25}]

    def test_round_trip(self):
        c = config_from_dict({"guidance": "random", "pose": {"min_range": 7}})
        assert config_from_dict(config_to_dict(c)) == c

    @pytest.mark.parametrize("bad", [{"try_num": 0}, {"n_insertions": 0}, {"guidance": "lucky"},
                                     {"colour": 1}, {"pose": {"nope": 1}}, {"fitness": {"alpha": 0.9}},
                                     {"sut": {"kind": "external", "command": "det"}}, {"rng_seed": -1}])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            config_from_dict(bad)

    def test_bad_override(self):
        with pytest.raises(ConfigError):
            load_config(None, ["try_num"])


def test_substreams_independent_and_stable():
    a = substream(1, "000001", 1, 2).random(4)
    assert np.array_equal(a, substream(1, "000001", 1, 2).random(4))
    for other in [(2, "000001", 1, 2), (1, "000002", 1, 2), (1, "000001", 2, 2), (1, "000001", 1, 3)]:
        assert not np.array_equal(a, substream(*other).random(4))


class TestGuidedRun:
    def test_traces_strictly_increase(self, guided):
        _, rep = guided
        assert any(r.success for r in rep.seeds)
        for r in rep.seeds:
            assert len(r.trace) == len(r.inserted) + (1 if r.trace else 0)
            assert all(b > a for a, b in zip(r.trace, r.trace[1:]))

    def test_accepted_trials_beat_incumbent(self, guided):
        _, rep = guided
        for r in rep.seeds:
            best = r.trace[0] if r.trace else None
            for t in r.trials:
                if t["outcome"] == "accepted":
                    assert t["fitness"]["total"] > best
                    best = t["fitness"]["total"]
                elif t["outcome"] == "rejected":
                    assert t["fitness"]["total"] <= best

    def test_labels_match_mesh_bounds(self, guided, small_dataset):
        cfg, rep = guided
        db = {e.name: e for e in load_object_database(cfg.objects_dir)}
        for r in rep.seeds:
            for d in r.inserted:
                want = mesh_bounds(db[d["mesh"]].mesh, Pose3(**d["pose"]))
                assert iou_3d(box3_of(d["box3"]), want) > 1 - 1e-9

    def test_no_collisions(self, guided):
        cfg, rep = guided
        for r in rep.seeds:
            if not r.success:
                continue
            seed = load_frame(cfg.seeds_dir, r.seed_id)
            boxes = [box3_of(d["box3"]) for d in r.inserted]
            for k, b in enumerate(boxes):
                assert all(iou_3d(b, g.box3) == 0 for g in seed.labels if g.box3 is not None)
                assert all(iou_3d(b, o) == 0 for o in boxes[:k])

    def test_totals_are_a_fold(self, guided):
        _, rep = guided
        t = fold_totals(rep.seeds)
        for k, v in t.items():
            assert rep.totals[k] == v
        assert t["successful"] == sum(r.success for r in rep.seeds)
        assert t["accepted_insertions"] == sum(len(r.inserted) for r in rep.seeds)

    def test_range_fault_flags_far_insertions(self, guided):
        _, rep = guided
        for r in rep.seeds:
            far = [d for d in r.inserted if np.linalg.norm(d["box3"]["center"]) > 25.0]
            if far:
                assert r.mr["violated"] and r.mr["new_counts"]["ObjectMissing"] >= 1

    def test_manifest_schema_and_reload(self, guided):
        cfg, rep = guided
        man = json.loads((Path(cfg.output_dir) / "manifest.json").read_text())
        jsonschema.validate(man, SCHEMA)
        assert [f["seed_id"] for f in man["frames"]] == [r.seed_id for r in rep.seeds if r.success]
        for f in man["frames"]:
            frame = load_frame(Path(cfg.output_dir) / f["frame_dir"], f["seed_id"])
            boxes = [g.box3 for g in frame.labels if g.box3 is not None]
            for d in f["inserted"]:
                assert max(iou_3d(box3_of(d["box3"]), b) for b in boxes) > 0.99
        report = json.loads((Path(cfg.output_dir) / "report.json").read_text())
        assert report["totals"]["successful"] == len(man["frames"])


class TestRandomRun:
    def test_first_valid_trial_accepted(self, small_dataset, tmp_path):
        rep = run_campaign(cfg_for(small_dataset, tmp_path, guidance="random", max_seeds=3), persist=False)
        for r in rep.seeds:
            by_ins = {}
            for t in r.trials:
                by_ins.setdefault(t["insertion"], []).append(t["outcome"])
            for outs in by_ins.values():
                valid = [o for o in outs if o in ("accepted", "rejected")]
                assert "rejected" not in valid and valid in ([], ["accepted"])
                if valid:
                    assert outs[-1] == "accepted"


class TestEdgeCases:
    def test_empty_manifest(self, small_dataset, tmp_path):
        cfg = cfg_for(small_dataset, tmp_path, try_num=1, pose={"min_range": 500, "dis_max": 600})
        rep = run_campaign(cfg)
        man = json.loads((tmp_path / "manifest.json").read_text())
        jsonschema.validate(man, SCHEMA)
        assert man["frames"] == [] and rep.totals["successful"] == 0
        assert all(r.status == "no_insertion" for r in rep.seeds)

    def test_sut_failure_recorded(self, small_dataset, tmp_path):
        class Broken:
            def detect(self, frame):
                raise SutFailure("down", "stack trace")
        rep = run_campaign(cfg_for(small_dataset, tmp_path, max_seeds=2), sut=Broken(), persist=False)
        assert [r.status for r in rep.seeds] == ["sut_failure"] * 2 and rep.totals["sut_failures"] == 2
        assert "stack trace" in rep.seeds[0].error


def write_cfg(tmp_path, root, **kw):
    p = tmp_path / "cfg.yaml"
    p.write_text(yaml.safe_dump({"seeds_dir": str(root / "seeds"), "objects_dir": str(root / "objects"),
                                 "max_seeds": 2, **kw}))
    return str(p)


class TestCli:
    def test_generate_and_mc(self, small_dataset, tmp_path, capsys):
        cfg = write_cfg(tmp_path, small_dataset)
        assert cli.main(["generate", "--config", cfg, "--output", str(tmp_path / "o"), "--seed", "5"]) == 0
        man = tmp_path / "o" / "manifest.json"
        if json.loads(man.read_text())["frames"]:
            assert cli.main(["mc", "--manifest", str(man)]) == 0

    def test_exit_codes(self, small_dataset, tmp_path):
        cfg = write_cfg(tmp_path, small_dataset)
        assert cli.main(["generate", "--config", cfg, "--set", "try_num=0"]) == 2
        no_seeds = write_cfg(tmp_path, small_dataset, seeds_dir=str(tmp_path / "nowhere"))
        assert cli.main(["generate", "--config", no_seeds, "--output", str(tmp_path / "o")]) == 4
        no_objects = write_cfg(tmp_path, small_dataset, objects_dir=str(tmp_path / "nowhere"))
        assert cli.main(["generate", "--config", no_objects, "--output", str(tmp_path / "o")]) == 2
        ext = write_cfg(tmp_path, small_dataset, sut={"kind": "external",
                                                      "command": "false {frame_dir} {out_file}"})
        assert cli.main(["generate", "--config", ext, "--output", str(tmp_path / "o2")]) == 3

    def test_evaluate(self, small_dataset, tmp_path, capsys):
        seeds = small_dataset / "seeds"
        ids = list_frame_ids(seeds)
        det = tmp_path / "det"
        det.mkdir()
        n_gt = 0
        for fid in ids:
            f = load_frame(seeds, fid)
            n_gt += sum(1 for g in f.labels if not g.dont_care)
            dets = [Detection(g.box3, g.box2, g.category, 0.9) for g in f.labels if not g.dont_care]
            (det / f"{fid}.txt").write_text(format_detections(dets, f.calib))
        assert cli.main(["evaluate", "--gt", str(seeds), "--det", str(det)]) == 0
        out = json.loads(capsys.readouterr().out)
        assert sum(out["summary"]["counts"].values()) == 0
        if n_gt:
            assert out["summary"]["ap"] == 1.0
        # GT files as detections carry no score column
        assert cli.main(["evaluate", "--gt", str(seeds), "--det", str(seeds / "label_2")]) == (3 if n_gt else 0)
