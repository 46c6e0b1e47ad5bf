#!/usr/bin/env python3
"""Convert patch features dumped from a real backbone into pioner archives.

Grids: one .npz per image with
    patches    float array (rows, cols, dim)
    attention  optional float array (rows, cols)
    orig_size  optional [height, width] of the image before resizing
    src_size   optional [height, width] fed to the backbone (default rows*patch)
written as <out_dir>/<stem>.piongrid, which backbone.name=precomputed reads.

Texts: --texts captions.txt --text-embeddings emb.npy (N x dim) writes the
JSON-lines table used for backbone.text_table.
"""

import argparse
import json
import pathlib
import struct
import sys

import numpy as np

MAGIC = b"PIONGRID1"


def grid_bytes(patches, attention, patch_size, src_size, orig_size, name):
    rows, cols, dim = patches.shape
    src_h, src_w = src_size if src_size is not None else (rows * patch_size, cols * patch_size)
    orig_h, orig_w = orig_size if orig_size is not None else (src_h, src_w)
    flags = 1 if attention is not None else 0
    name_b = name.encode("utf-8")
    header = struct.pack("<10I", rows, cols, dim, patch_size, src_h, src_w, orig_h, orig_w, flags, len(name_b))
    body = np.ascontiguousarray(patches, dtype="<f4").tobytes()
    if attention is not None:
        if attention.shape != (rows, cols):
            raise ValueError(f"attention shape {attention.shape} does not match grid {rows}x{cols}")
        body += np.ascontiguousarray(attention, dtype="<f4").tobytes()
    return MAGIC + header + name_b + body


def export_grids(paths, out_dir, patch_size):
    out_dir.mkdir(parents=True, exist_ok=True)
    for path in paths:
        data = np.load(path)
        patches = data["patches"]
        if patches.ndim != 3 or not np.isfinite(patches).all():
            raise ValueError(f"{path}: 'patches' must be a finite (rows, cols, dim) array")
        attention = data["attention"] if "attention" in data else None
        orig = tuple(int(x) for x in data["orig_size"]) if "orig_size" in data else None
        src = tuple(int(x) for x in data["src_size"]) if "src_size" in data else None
        stem = pathlib.Path(path).stem
        (out_dir / f"{stem}.piongrid").write_bytes(grid_bytes(patches, attention, patch_size, src, orig, stem))


def export_texts(texts_path, emb_path, out_path):
    texts = [line.rstrip("\n") for line in open(texts_path, encoding="utf-8") if line.strip()]
    emb = np.load(emb_path)
    if emb.shape[0] != len(texts):
        raise ValueError(f"{len(texts)} texts but {emb.shape[0]} embeddings")
    with open(out_path, "w", encoding="utf-8") as f:
        for text, vec in zip(texts, emb):
            f.write(json.dumps({"text": text, "embedding": [float(x) for x in vec]}) + "\n")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("npz", nargs="*", help="per-image .npz feature files")
    ap.add_argument("--out-dir", type=pathlib.Path, help="directory for .piongrid files")
    ap.add_argument("--patch-size", type=int, default=14)
    ap.add_argument("--texts", help="captions, one per line")
    ap.add_argument("--text-embeddings", help=".npy array aligned with --texts")
    ap.add_argument("--text-table", help="output JSON-lines table")
    args = ap.parse_args(argv)
    if args.npz:
        if args.out_dir is None:
            ap.error("--out-dir is required with grid inputs")
        export_grids(args.npz, args.out_dir, args.patch_size)
    if args.texts or args.text_embeddings or args.text_table:
        if not (args.texts and args.text_embeddings and args.text_table):
            ap.error("--texts, --text-embeddings and --text-table go together")
        export_texts(args.texts, args.text_embeddings, args.text_table)
    return 0


if __name__ == "__main__":
    sys.exit(main())
