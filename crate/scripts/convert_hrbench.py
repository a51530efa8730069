#!/usr/bin/env python3
"""Convert an HR-Bench TSV file to zoomrefine dataset JSONL plus image files.

Usage: convert_hrbench.py HR_BENCH.tsv OUT_DIR

Writes OUT_DIR/dataset.jsonl and OUT_DIR/images/<index>.<ext>; run
`zoomrefine eval --dataset OUT_DIR/dataset.jsonl --image-root OUT_DIR`.

Field mapping (source column -> record):
  index          -> id
  image (base64) -> decoded to images/<index>.<ext>; image holds that relative path
  question       -> question
  A, B, C, D[, E]-> options, in label order, stopping at the first empty column
  answer         -> answer (single letter)
  category       -> subtask (FSP or FCP)
  (constant)     -> task: "perception"
"""

import argparse
import base64
import csv
import json
import os
import sys

csv.field_size_limit(sys.maxsize)


def sniff_ext(data):
    if data.startswith(b"\x89PNG"):
        return "png"
    if data.startswith(b"\xff\xd8"):
        return "jpg"
    return "bin"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("tsv")
    ap.add_argument("out_dir")
    args = ap.parse_args()
    os.makedirs(os.path.join(args.out_dir, "images"), exist_ok=True)
    count = 0
    with open(args.tsv, encoding="utf-8", newline="") as f, open(
        os.path.join(args.out_dir, "dataset.jsonl"), "w", encoding="utf-8"
    ) as out:
        for row in csv.DictReader(f, delimiter="\t"):
            options = []
            for label in "ABCDE":
                text = (row.get(label) or "").strip()
                if not text:
                    break
                options.append(text)
            answer = row["answer"].strip()
            if answer not in "ABCDE"[: len(options)] or len(answer) != 1:
                raise ValueError(f"row {row['index']}: answer {answer!r} not among {len(options)} options")
            data = base64.b64decode(row["image"])
            rel = os.path.join("images", f"{row['index']}.{sniff_ext(data)}")
            with open(os.path.join(args.out_dir, rel), "wb") as img:
                img.write(data)
            record = {
                "id": str(row["index"]),
                "image": rel,
                "question": row["question"],
                "options": options,
                "answer": answer,
                "task": "perception",
                "subtask": row["category"].strip(),
            }
            out.write(json.dumps(record, ensure_ascii=False) + "\n")
            count += 1
    print(f"wrote {count} records to {args.out_dir}", file=sys.stderr)


if __name__ == "__main__":
    main()
