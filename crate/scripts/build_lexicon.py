#!/usr/bin/env python3
"""Regenerate crates/core/data/lexicon.tsv from a CMU Pronouncing Dictionary file.

Usage: build_lexicon.py CMUDICT_PATH > crates/core/data/lexicon.tsv

Keeps the first pronunciation of every grammar word, every homophone of a
grammar word, and up to NEIGHBORS words at phoneme edit distance 1.
"""
import re
import sys
from pathlib import Path

NEIGHBORS = 20
ROOT = Path(__file__).resolve().parent.parent
NUMBER_WORDS = (
    "zero one two three four five six seven eight nine ten eleven twelve thirteen "
    "fourteen fifteen sixteen seventeen eighteen nineteen twenty thirty forty fifty "
    "sixty seventy eighty ninety hundred thousand million and"
).split()


def grammar_words():
    words = set(NUMBER_WORDS)
    for line in (ROOT / "crates/core/data/grammar.txt").read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#") or line.startswith("["):
            continue
        for tok in re.sub(r"\{[a-z]+\}", " ", line).split():
            words.add(tok)
    return words


def lev(a, b):
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def main():
    entries = {}
    for line in open(sys.argv[1], encoding="utf-8"):
        line = line.split("#")[0].strip()
        if not line:
            continue
        word, *phones = line.split()
        if "(" in word or not re.fullmatch(r"[a-z]+", word):
            continue
        entries.setdefault(word, tuple(re.sub(r"\d", "", p) for p in phones))

    wanted = grammar_words()
    missing = sorted(w for w in wanted if w not in entries)
    if missing:
        sys.exit(f"grammar words missing from dictionary: {missing}")

    by_pron = {}
    for w, p in entries.items():
        by_pron.setdefault(p, []).append(w)

    keep = set(wanted)
    for w in sorted(wanted):
        p = entries[w]
        keep.update(by_pron[p])
        near = [
            v for v, q in entries.items()
            if v != w and abs(len(q) - len(p)) <= 1 and len(v) > 1 and lev(p, q) == 1
        ]
        near.sort(key=lambda v: (abs(len(v) - len(w)), v))
        keep.update(near[:NEIGHBORS])

    print(";;; Pronunciation subset derived from the CMU Pronouncing Dictionary.")
    print(";;; Copyright (C) 1993-2015 Carnegie Mellon University. All rights reserved.")
    print(";;; Redistribution and use in source and binary forms, with or without")
    print(";;; modification, are permitted under the BSD-style terms of the CMU")
    print(";;; Pronouncing Dictionary license. Stress digits are stripped and only")
    print(";;; the first listed pronunciation of each word is kept.")
    for w in sorted(keep):
        print(f"{w}\t{' '.join(entries[w])}")


if __name__ == "__main__":
    main()
