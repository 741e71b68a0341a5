"""Command line front end.

    oodsexport export --model random:dim=16 --tiles slides/ --out maps/ \
        --tile-size 672 --inner 252
"""

from __future__ import annotations

import argparse
import sys

from . import jobs, wire


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oodsexport")
    subs = parser.add_subparsers(dest="command", required=True)

    s = subs.add_parser("export", help="run a model over tiles and write per-shift maps")
    s.add_argument("--model", required=True, help="model reference, e.g. constant or random:dim=16,seed=7")
    s.add_argument("--tiles", required=True, help="directory of input tiles")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--tile-size", dest="tile_size", type=int, default=672)
    s.add_argument("--inner", type=int, default=252)
    s.add_argument("--stride", type=int, default=84)
    s.add_argument("--latent-scale", dest="latent_scale", type=int, default=14)
    s.add_argument("--device", default="cpu")
    s.add_argument("--batch", type=int, default=8)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        geometry = wire.TileGeometry(
            tile=args.tile_size, inner=args.inner, stride=args.stride, latent=args.latent_scale
        )
        job = jobs.ExportJob(
            model=args.model,
            tiles_dir=args.tiles,
            out_dir=args.out,
            geometry=geometry,
            device=args.device,
            batch_size=args.batch,
        )
        result = jobs.export(job)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    n_shifts = len(geometry.shifts())
    print(f"exported {len(result.tiles)} tiles x {n_shifts} shifts to {job.out_dir}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
