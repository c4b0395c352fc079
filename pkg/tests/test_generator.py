import json
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from synthdet import toy
from synthdet.dataset_io import load_object_library, read_rgb
from synthdet.errors import MissingFile
from synthdet.generator import RunConfig, generate_dataset, load_run_manifest, run_stats, to_voc_xml
from synthdet.placement import GenerationParams, scale_view


def make_config(root, mode="SP-SI-SS", n_frames=10, variants=None, k=4, out="run", **extra):
    path = toy.write_toy_dataset(root, n_frames=n_frames, seed=0, variants=variants, mode=mode,
                                 composites_per_frame=k)
    doc = json.loads(path.read_text())
    doc["output_dir"] = out
    doc.update(extra)
    path.write_text(json.dumps(doc))
    return RunConfig.from_file(path)


@pytest.fixture(scope="module")
def si_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("si")
    cfg = make_config(root, write_voc=True)
    return cfg, generate_dataset(cfg)


def recount(manifest):
    """Stats recomputed straight from the manifest, independently of run_stats."""
    comps = manifest["composites"]
    labels = Counter(o["label"] for c in comps for o in c["objects"])
    return {
        "frames_excluded": len(manifest["excluded"]),
        "frames_used": manifest["frames_in_manifest"] - len(manifest["excluded"]),
        "composites": len(comps),
        "instances_total": sum(labels.values()),
        "instances_per_class": dict(labels),
    }


def test_four_per_used_frame(si_run):
    cfg, manifest = si_run
    per_frame = Counter(c["frame_id"] for c in manifest["composites"])
    excluded = {e["frame_id"] for e in manifest["excluded"]}
    # every fifth toy frame is wall-only
    assert excluded == {"bg004", "bg009"}
    assert all(e["reason"] == "no_support_surface" for e in manifest["excluded"])
    assert set(per_frame.values()) == {4}
    assert len(per_frame) == 8 and len(manifest["composites"]) == 32
    assert not set(per_frame) & excluded


def test_outputs_on_disk(si_run):
    cfg, manifest = si_run
    out = cfg.output_dir
    for c in manifest["composites"]:
        cid = c["composite_id"]
        ann = json.loads((out / "annotations" / f"{cid}.json").read_text())
        assert ann["objects"] == c["objects"]
        assert (out / ann["image"]).is_file()
        assert (out / "annotations_voc" / f"{cid}.xml").is_file()
    assert load_run_manifest(out) == json.loads(json.dumps(manifest))
    assert (out / "errors.jsonl").read_text() == ""


def test_stats_match_recount(si_run):
    cfg, manifest = si_run
    stats = json.loads((cfg.output_dir / "stats.json").read_text())
    oracle = recount(manifest)
    for key, val in oracle.items():
        assert stats[key] == val
    assert stats["frames_used"] + stats["frames_excluded"] == stats["frames_in_manifest"] == 10
    assert stats["excluded_by_reason"] == {"no_support_surface": 2}
    assert sum(stats["bbox_size_histogram"].values()) == stats["instances_total"]
    assert stats["mean_objects_per_composite"] == pytest.approx(stats["instances_total"] / 32)


def test_empty_and_arithmetic_stats():
    s = run_stats({"frames_in_manifest": 0, "composites": [], "excluded": []})
    assert s["composites"] == s["instances_total"] == s["frames_used"] == 0
    assert s["mean_objects_per_composite"] == 0.0
    assert all(v == 0 for v in s["bbox_size_histogram"].values())
    obj = {"label": "a", "bbox": [0, 0, 20, 20]}
    comps = [{"objects": [obj] * 3} for _ in range(8)]
    s = run_stats({"frames_in_manifest": 2, "composites": comps, "excluded": []})
    assert s["instances_total"] == 24 and s["bbox_size_histogram"]["16-32"] == 24


def test_si_pixels_match_annotations(si_run):
    cfg, manifest = si_run
    lib = load_object_library(cfg.object_library)
    min_vis = cfg.params.min_px ** 2
    for c in manifest["composites"][:12]:
        img = read_rgb(cfg.output_dir / "images" / f"{c['composite_id']}.png")
        for o in c["objects"]:
            x0, y0, x1, y1 = o["bbox"]
            view = lib.instances[o["label"]][o["view"]["index"]].cropped_to_mask()
            rgb, mask = scale_view(view, (x1 - x0, y1 - y0))
            same = np.all(img[y0:y1, x0:x1] == rgb, axis=-1) & mask
            assert same.sum() >= min_vis


def test_byte_identical_rerun(si_run, tmp_path):
    cfg, _ = si_run
    cfg2 = RunConfig(**{**vars(cfg), "output_dir": tmp_path / "again"})
    generate_dataset(cfg2)
    for sub in ("annotations", "annotations_voc", "images"):
        a = sorted((cfg.output_dir / sub).iterdir())
        b = sorted((cfg2.output_dir / sub).iterdir())
        assert [p.name for p in a] == [p.name for p in b]
        assert all(x.read_bytes() == y.read_bytes() for x, y in zip(a, b))
    assert (cfg.output_dir / "stats.json").read_bytes() == (cfg2.output_dir / "stats.json").read_bytes()


def test_parallel_matches_serial(si_run, tmp_path):
    cfg, _ = si_run
    cfg2 = RunConfig(**{**vars(cfg), "output_dir": tmp_path / "par"})
    generate_dataset(cfg2, jobs=2)
    a = sorted((cfg.output_dir / "annotations").iterdir())
    b = sorted((cfg2.output_dir / "annotations").iterdir())
    assert [x.read_bytes() for x in a] == [y.read_bytes() for y in b]


def test_missing_depth_frame_excluded(tmp_path):
    cfg = make_config(tmp_path, variants=["kitchen", "no_depth", "kitchen"], n_frames=3)
    m = generate_dataset(cfg)
    assert m["excluded"] == [{"frame_id": "bg001", "reason": "no_support_surface"}]
    assert run_stats(m)["frames_excluded"] == 1


def test_unlabeled_frame_excluded_in_sp(tmp_path):
    cfg = make_config(tmp_path, n_frames=2, variants=["kitchen", "kitchen"])
    doc = json.loads(cfg.scene_manifest.read_text())
    del doc["frames"][1]["labels"]
    cfg.scene_manifest.write_text(json.dumps(doc))
    m = generate_dataset(cfg)
    assert m["excluded"] == [{"frame_id": "bg001", "reason": "labels_missing"}]


def test_bad_frame_logged_not_fatal(tmp_path):
    cfg = make_config(tmp_path, n_frames=2, variants=["kitchen", "kitchen"])
    (cfg.scene_manifest.parent / "bg000.rgb.png").unlink()
    m = generate_dataset(cfg)
    assert [e["frame_id"] for e in m["errors"]] == ["bg000"]
    assert "MissingFile" in m["errors"][0]["error"]
    lines = (cfg.output_dir / "errors.jsonl").read_text().splitlines()
    assert json.loads(lines[0])["frame_id"] == "bg000"
    assert {c["frame_id"] for c in m["composites"]} == {"bg001"}


def test_rp_mode_uses_every_frame(tmp_path):
    cfg = make_config(tmp_path, mode="RP-SI-RS", n_frames=5, k=2)
    m = generate_dataset(cfg)
    assert m["excluded"] == []
    assert len(m["composites"]) == 10


def test_blended_run(tmp_path):
    cfg = make_config(tmp_path, mode="SP-BL-SS", n_frames=3, variants=["kitchen"] * 3, k=2)
    m = generate_dataset(cfg)
    assert len(m["composites"]) == 6
    frame = read_rgb(cfg.scene_manifest.parent / "bg000.rgb.png")
    img = read_rgb(cfg.output_dir / "images" / "bg000_00.png")
    # outside every box the background is untouched
    outside = np.ones(frame.shape[:2], bool)
    for o in m["composites"][0]["objects"]:
        x0, y0, x1, y1 = o["bbox"]
        outside[y0:y1, x0:x1] = False
    assert np.array_equal(img[outside], frame[outside])


def test_voc_xml_boxes_are_one_based():
    xml = to_voc_xml({"image": "images/a.png", "width": 10, "height": 8,
                      "objects": [{"label": "cup", "bbox": [0, 2, 5, 7]}]})
    assert "<xmin>1</xmin>" in xml and "<ymin>3</ymin>" in xml
    assert "<xmax>5</xmax>" in xml and "<ymax>7</ymax>" in xml


def test_config_validation(tmp_path):
    with pytest.raises(MissingFile):
        RunConfig.from_file(tmp_path / "none.json")
    with pytest.raises(ValueError, match="unknown config keys"):
        RunConfig.from_dict({"scene_manifest": "a", "object_library": "b", "output_dir": "c", "bogus": 1})
    with pytest.raises(ValueError):
        RunConfig.from_dict({"scene_manifest": "a", "object_library": "b"})
    cfg = RunConfig.from_dict({"scene_manifest": "a", "object_library": "b", "output_dir": "c",
                               "params": {"positioning": "RP"}}, base_dir="/base")
    assert cfg.scene_manifest == Path("/base/a")
    assert cfg.params == GenerationParams(positioning="RP")
    with pytest.raises(MissingFile):
        generate_dataset(cfg)
