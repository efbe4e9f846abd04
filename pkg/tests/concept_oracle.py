"""Brute-force reference for the 14 concept calculators.

Reads the vendored TSV tables with plain file IO and loops residue by residue;
shares no code with the package beyond the data files themselves.
"""
from pathlib import Path

import cblm

DATA = Path(cblm.__file__).parent / "data"
LETTERS = "ACDEFGHIKLMNPQRSTVWY"


def _rows(name):
    out = []
    header = None
    for line in (DATA / name).read_text().split("\n"):
        if not line or line[0] == "#":
            continue
        cells = line.split("\t")
        if header is None:
            header = cells
            continue
        out.append(dict(zip(header, cells)))
    return out


def _scale(name):
    table = {}
    for r in _rows(name):
        table[r["residue"]] = float(r["value"])
    return table


KD = _scale("kyte_doolittle.tsv")
HW = _scale("hopp_woods.tsv")
EM = _scale("emini.tsv")
MASS = _scale("residue_masses.tsv")
DIWV = {}
for _r in _rows("diwv.tsv"):
    DIWV[_r["first"] + _r["second"]] = float(_r["value"])
PKA = [(r["group"], int(r["sign"]), float(r["pka"])) for r in _rows("pka.tsv")]


def clean(seq):
    s = ""
    for ch in seq.upper():
        if ch in LETTERS:
            s += ch
    return s


def mean_scale(seq, table):
    s = clean(seq)
    total = 0.0
    for ch in s:
        total += table[ch]
    return total / len(s)


def charge(seq, ph):
    s = clean(seq)
    q = 0.0
    for group, sign, pka in PKA:
        if group in ("Nterm", "Cterm"):
            n = 1
        else:
            n = 0
            for ch in s:
                if ch == group:
                    n += 1
        if n == 0:
            continue
        if sign > 0:
            q += n / (1.0 + 10.0 ** (ph - pka))
        else:
            q -= n / (1.0 + 10.0 ** (pka - ph))
    return q


def pi(seq):
    lo, hi = 0.0, 14.0
    mid = 7.0
    i = 0
    while i < 100:
        mid = (lo + hi) / 2.0
        q = charge(seq, mid)
        if abs(q) < 1e-3:
            return mid
        if q > 0:
            lo = mid
        else:
            hi = mid
        i += 1
    return mid


def frac(seq, members):
    s = clean(seq)
    n = 0
    for ch in s:
        if ch in members:
            n += 1
    return n / len(s)


def count(seq, letter):
    n = 0
    for ch in clean(seq):
        if ch == letter:
            n += 1
    return n


def oracle(seq):
    s = clean(seq)
    mw = 18.0153
    for ch in s:
        mw += MASS[ch]
    inst = 0.0
    for i in range(len(s) - 1):
        inst += DIWV[s[i] + s[i + 1]]
    inst = 10.0 / len(s) * inst
    reduced = 5500.0 * count(s, "W") + 1490.0 * count(s, "Y")
    return [
        mw,
        charge(s, 6.0),
        charge(s, 7.0),
        pi(s),
        frac(s, "FWY"),
        inst,
        frac(s, "VIYFWL"),
        frac(s, "NPGS"),
        frac(s, "EMAL"),
        reduced,
        reduced + 125.0 * (count(s, "C") // 2),
        mean_scale(s, KD),
        mean_scale(s, HW),
        mean_scale(s, EM),
    ]
