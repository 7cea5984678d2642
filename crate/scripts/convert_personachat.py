#!/usr/bin/env python3
"""Convert a persona-grouped dialogue JSON dump to the corpus JSONL
schema used by the pkt CLI (one line per persona: persona_id,
description, dialogues of {speaker, text} turns).

Expected input: the widely mirrored personachat_self_original.json
layout, i.e. {"train": [...], "valid": [...]} where each entry carries
"personality" (list of trait sentences) and "utterances" (growing
history snapshots whose last candidate is the gold reply):

    {"personality": ["i like dogs .", ...],
     "utterances": [{"history": [...partner/self turns...],
                     "candidates": [..., "gold reply"]}, ...]}

Dialogues sharing an identical personality list are grouped under one
persona. Speaker 1 is the partner, speaker 2 is the persona speaker
whose traits are listed, so the per-turn roles match the synthetic
generator's convention. Group sizes vary, which is what the split
step's few-shot threshold keys on.
"""

import argparse
import json
import sys
from collections import OrderedDict

SILENCE = "__ SILENCE __"


def dialogue_from_entry(entry):
    """Full turn list: the last snapshot's history plus the gold reply."""
    utterances = entry.get("utterances") or []
    if not utterances:
        return None
    last = utterances[-1]
    history = list(last.get("history") or [])
    candidates = last.get("candidates") or []
    if candidates:
        history.append(candidates[-1])
    turns = []
    for i, text in enumerate(history):
        text = text.strip()
        if not text or text == SILENCE:
            continue
        turns.append({"speaker": 1 if i % 2 == 0 else 2, "text": text})
    return turns if len(turns) >= 2 else None


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("input", help="persona-grouped JSON dump")
    ap.add_argument("output", help="corpus JSONL destination")
    ap.add_argument(
        "--split",
        default="both",
        choices=["train", "valid", "both"],
        help="which top-level split(s) to convert (default: both)",
    )
    ap.add_argument(
        "--threshold",
        type=int,
        default=6,
        help="dialogue count reported as the few-shot boundary (default: 6)",
    )
    args = ap.parse_args()

    with open(args.input, encoding="utf-8") as f:
        data = json.load(f)
    splits = ["train", "valid"] if args.split == "both" else [args.split]
    entries = []
    for name in splits:
        if name not in data:
            sys.exit(f"input has no '{name}' split (found: {', '.join(data)})")
        entries.extend(data[name])

    # group by the exact trait list; insertion order keeps ids stable
    groups = OrderedDict()
    skipped = 0
    for entry in entries:
        description = [s.strip() for s in entry.get("personality") or [] if s.strip()]
        dialogue = dialogue_from_entry(entry)
        if not description or dialogue is None:
            skipped += 1
            continue
        groups.setdefault(tuple(description), []).append(dialogue)

    few_shot = 0
    with open(args.output, "w", encoding="utf-8") as out:
        for i, (description, dialogues) in enumerate(groups.items()):
            if len(dialogues) < args.threshold:
                few_shot += 1
            record = {
                "persona_id": f"pc{i:05d}",
                "description": list(description),
                "dialogues": dialogues,
            }
            out.write(json.dumps(record, ensure_ascii=False) + "\n")

    total = len(groups)
    print(
        f"wrote {total} personas ({sum(len(d) for d in groups.values())} dialogues) "
        f"to {args.output}; {few_shot} personas fall below {args.threshold} dialogues"
        + (f"; skipped {skipped} malformed entries" if skipped else "")
    )


if __name__ == "__main__":
    main()
