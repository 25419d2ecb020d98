"""From MetaImage scans to a cube cache.

Writes a few synthetic int16 scans with one annotated nodule each and
anisotropic spacing, then runs the preprocessing chain by hand: read,
resample to 1 mm, window to [0, 1], and draw one positive and one
negative 48^3 cube per scan.  The cubes go to an NPY cache with a
manifest, which is what ``nodule3d train`` reads.

    python3 demos/preprocess_scans.py [OUT_DIR]
"""

import sys
import tempfile
from pathlib import Path

from nodule3d import read_mhd
from nodule3d.preprocess import (SamplerConfig, contains, normalize, preprocess_scan, read_cube_cache,
                                 resample, write_cube_cache)
from nodule3d.seeding import substream
from nodule3d.synthetic import write_synthetic_scans
from nodule3d.volume_io import parse_annotations, world_to_voxel


def main(out_dir):
    out_dir = Path(out_dir)
    paths, ann_path = write_synthetic_scans(out_dir / "scans", n=3, seed=11, dims=(110, 100, 45),
                                            spacing=(0.7, 0.7, 2.0))
    annotations = parse_annotations(ann_path.read_text())
    cfg = SamplerConfig(seed=11)

    v = read_mhd(paths[0])
    iso = resample(v, cfg.target_spacing)
    norm = normalize(iso, cfg.hu_window)
    print(f"{v.meta.series_id}: {v.meta.dims} at {v.meta.spacing} mm -> {iso.meta.dims} at 1 mm")
    print(f"  HU range [{v.voxels.min():.0f}, {v.voxels.max():.0f}] -> "
          f"[{norm.voxels.min():.2f}, {norm.voxels.max():.2f}]")

    cubes = []
    for path in paths:
        scan = read_mhd(path)
        found = preprocess_scan(scan, annotations, cfg, substream(cfg.seed, "sampler", len(cubes)))
        for c in found:
            nodule = next(a for a in annotations if a.series_id == c.source_series)
            inside = contains(c.corner_voxel, cfg.cube_edge,
                              world_to_voxel(resample(scan, cfg.target_spacing).meta, nodule.center_world))
            print(f"  {c.source_series} label={c.label} corner={c.corner_voxel} "
                  f"nodule centre inside={inside}")
        cubes += found

    write_cube_cache(cubes, out_dir / "cache")
    back = read_cube_cache(out_dir / "cache")
    print(f"cache: {len(back)} cubes, first has shape {back[0].data.shape} and dtype {back[0].data.dtype}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="nodule3d-"))
