# ---
# jupyter:
#   jupytext:
#     formats: ipynb,py:percent
#     text_representation:
#       extension: .py
#       format_name: percent
#       format_version: '1.3'
#   kernelspec:
#     display_name: Python 3
#     language: python
#     name: python3
# ---

# %% [markdown]
# # PE32 sections, entropy and two packer detectors
#
# A plain synthetic executable and a packed copy of it, looked at through the
# section-entropy heuristic and the windowed code-ratio detector.

# %%
import numpy as np

from wxunpack.detect import classify_regions, detect_code_ratio, detect_entropy_heuristic
from wxunpack.pe import parse_pe
from wxunpack.synth import CorpusSpec, PackRecipe, iter_corpus, make_plain_pe, pack

plain = make_plain_pe(7)
packed = pack(plain, PackRecipe(family=2, layers=2, key_seed=99, oep_rva=0))

for label, blob in (("plain", plain), ("packed", packed)):
    img = parse_pe(blob)
    print(f"{label}: {len(blob)} bytes, entry rva {img.entry_point_rva:#x}")
    for s in img.sections:
        print(f"  {s.name:<7} raw {s.raw_offset:#06x}+{s.raw_size:<6} entropy {s.entropy:.3f}")

# %% [markdown]
# The entropy rule wants one section above 7.4 bits/byte carrying more than 20% of the file.

# %%
for label, blob in (("plain", plain), ("packed", packed)):
    v = detect_entropy_heuristic(parse_pe(blob))
    print(label, v.packed, {k: round(x, 3) for k, x in v.metrics.items()})

# %% [markdown]
# The region map tiles the whole file in 256-byte windows. Code fraction ignores Null and String regions.

# %%
for label, blob in (("plain", plain), ("packed", packed)):
    rm = classify_regions(blob)
    kinds = {k.value: n for k, n in rm.bytes_by_kind().items() if n}
    v = detect_code_ratio(blob)
    print(f"{label}: {kinds} code_fraction={v.metric:.3f} packed={v.packed}")

# %% [markdown]
# Detection rates per corpus category.

# %%
spec = CorpusSpec(plain=30, text=10, lowcode=10, packed=30)
tally = {}
for data, e in iter_corpus(spec, 3):
    hits = tally.setdefault(e.category, np.zeros(3, dtype=int))
    hits += [detect_entropy_heuristic(parse_pe(data)).packed, detect_code_ratio(data).packed, 1]
for cat, (ent, ratio, n) in tally.items():
    print(f"{cat:<8} entropy {ent:>2}/{n}  code-ratio {ratio:>2}/{n}")
