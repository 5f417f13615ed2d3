"""Reference scorer used to produce the expected column of denotation_cases.jsonl.

Run: python3 denotation_reference.py
Writes denotation_cases.jsonl and exact_cases.jsonl next to this file.
"""
import itertools
import json
import re
import unicodedata

QUOTES = {('"', '"'), ("'", "'"), ("`", "`"), ("“", "”"), ("‘", "’")}
PLAIN = re.compile(r"^[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?$")
GROUPED = re.compile(r"^[+-]?\d{1,3}(,\d{3})+(\.\d+)?$")


def normalize(s):
    s = unicodedata.normalize("NFKC", s).strip().lower()
    while len(s) >= 2 and (s[0], s[-1]) in QUOTES:
        s = s[1:-1].strip()
    return " ".join(s.split())


def number(s):
    if "," in s:
        if not GROUPED.match(s):
            return None
        s = s.replace(",", "")
    if not PLAIN.match(s):
        return None
    return float(s)


def same(a, b):
    x, y = number(a), number(b)
    if x is not None and y is not None:
        return abs(x - y) <= 1e-6
    return a == b


def values(items):
    return [normalize(v) for item in items for v in item.split("|")]


def match(predicted, gold):
    p, g = values([predicted]), values(gold)
    if len(p) != len(g):
        return False
    return any(all(same(a, b) for a, b in zip(p, perm)) for perm in itertools.permutations(g))


CASES = [
    ("Eric Wynalda", ["Eric Wynalda"]),
    ("eric wynalda", ["Eric Wynalda"]),
    ("  Eric   Wynalda ", ["Eric Wynalda"]),
    ('"Eric Wynalda"', ["Eric Wynalda"]),
    ("'Eric Wynalda'", ["Eric Wynalda"]),
    ("“Eric Wynalda”", ["Eric Wynalda"]),
    ("Clint Dempsey", ["Eric Wynalda"]),
    ("Eric", ["Eric Wynalda"]),
    ("5.0", ["5"]),
    ("5", ["5.000000"]),
    ("5.0000001", ["5"]),
    ("5.00001", ["5"]),
    ("-3", ["-3.0"]),
    ("+3", ["3"]),
    ("1,234", ["1234"]),
    ("1,234.5", ["1234.50"]),
    ("12,34", ["1234"]),
    ("1e3", ["1000"]),
    (".5", ["0.5"]),
    ("inf", ["inf"]),
    ("inf", ["infinity"]),
    ("nan", ["NaN"]),
    ("2|1", ["1", "2"]),
    ("2|2", ["1", "2"]),
    ("1|2|3", ["3", "2", "1"]),
    ("1|2", ["1", "2", "3"]),
    ("a | b", ["b|a"]),
    ("A|B", ["a", "b"]),
    ("1.0|2", ["2", "1"]),
    ("x|x", ["x", "x"]),
    ("x|y", ["x", "x"]),
    ("", [""]),
    ("", ["0"]),
    ("0", ["0.0"]),
    ("0", ["-0"]),
    ("５", ["5"]),
    ("ＡＢＣ", ["abc"]),
    ("café", ["café"]),
    ("1990–2000", ["1990–2000"]),
    ("1990-2000", ["1990–2000"]),
    ('""quoted""', ["quoted"]),
    ("'unbalanced", ["unbalanced"]),
    ("New\tYork", ["new york"]),
    ("New\nYork", ["new york"]),
    ("3 goals", ["3"]),
    ("$5", ["5"]),
    ("50%", ["50%"]),
    ("2004", ["2004"]),
    ("2,004", ["2004"]),
    ("yes", ["Yes"]),
]


def label(s):
    s = s.strip().lower()
    return s if s in ("yes", "no") else None


def exact(predicted, gold):
    p = label(predicted)
    return p is not None and p == label(gold)


EXACT = [
    ("yes", "yes"),
    ("Yes ", "yes"),
    ("NO", "no"),
    ("no", "yes"),
    ("yes", "no"),
    ("entailed", "yes"),
    ("", "no"),
    ("yes.", "yes"),
    ("\tno\n", "no"),
    ("y", "yes"),
]

if __name__ == "__main__":
    import os

    here = os.path.dirname(os.path.abspath(__file__))
    assert len(CASES) == 50, len(CASES)
    assert len(EXACT) == 10, len(EXACT)
    with open(os.path.join(here, "denotation_cases.jsonl"), "w", encoding="utf-8") as f:
        for predicted, gold in CASES:
            row = {"predicted": predicted, "gold": gold, "expected": match(predicted, gold)}
            f.write(json.dumps(row, ensure_ascii=False) + "\n")
    with open(os.path.join(here, "exact_cases.jsonl"), "w", encoding="utf-8") as f:
        for predicted, gold in EXACT:
            row = {"predicted": predicted, "gold": gold, "expected": exact(predicted, gold)}
            f.write(json.dumps(row, ensure_ascii=False) + "\n")
