#!/usr/bin/env python3
"""Convert an MME-RealWorld annotation file to zoomrefine dataset JSONL.

Usage: convert_mme_realworld.py ANNOTATIONS.json OUT.jsonl [--subtask-field Subtask]

Field mapping (source -> record):
  Question_id        -> id
  Image              -> image (kept relative; pass --image-root to `zoomrefine eval`)
  Text               -> question
  Answer Choices     -> options, with leading "(A) " style labels stripped
  Ground truth       -> answer (single letter A-E)
  Task               -> task ("perception" or "reasoning", lowercased)
  Subtask            -> subtask (override the source key with --subtask-field)
"""

import argparse
import json
import re
import sys

LABEL_PREFIX = re.compile(r"^\s*\(?([A-E])[\).:]\s*")


def strip_label(text, expected):
    m = LABEL_PREFIX.match(text)
    if m and m.group(1) == expected:
        return text[m.end():].strip()
    return text.strip()


def convert(item, subtask_field):
    options = [strip_label(o, "ABCDE"[i]) for i, o in enumerate(item["Answer Choices"])]
    answer = item["Ground truth"].strip().strip("()")
    if len(options) > 5 or answer not in "ABCDE"[: len(options)] or len(answer) != 1:
        raise ValueError(f"record {item['Question_id']}: answer {answer!r} not among {len(options)} options")
    return {
        "id": str(item["Question_id"]),
        "image": item["Image"],
        "question": item["Text"],
        "options": options,
        "answer": answer,
        "task": item["Task"].strip().lower(),
        "subtask": item[subtask_field],
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("annotations")
    ap.add_argument("out")
    ap.add_argument("--subtask-field", default="Subtask")
    args = ap.parse_args()
    with open(args.annotations, encoding="utf-8") as f:
        items = json.load(f)
    with open(args.out, "w", encoding="utf-8") as out:
        for item in items:
            out.write(json.dumps(convert(item, args.subtask_field), ensure_ascii=False) + "\n")
    print(f"wrote {len(items)} records to {args.out}", file=sys.stderr)


if __name__ == "__main__":
    main()
