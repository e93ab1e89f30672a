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
# # Write-then-execute monitoring in the simulated sandbox
#
# The emulator only produces Write/Exec/Tick events. The monitor sees nothing else,
# yet recovers one dump per packing layer.

# %%
from collections import Counter
from itertools import islice

from wxunpack.pe import parse_pe
from wxunpack.sandbox import SandboxConfig, emulate, monitor_unpack, orchestrate, run_analysis
from wxunpack.synth import CorpusSpec, PackRecipe, iter_corpus, make_plain_pe, pack, reference_unpack

base = make_plain_pe(5)
r = PackRecipe(3, 3, key_seed=42, oep_rva=0)
sample = pack(base, r)
n = len(parse_pe(base).payload())

events = list(islice(emulate(sample), 3 * (n // 64) + 100))
print(Counter(type(e).__name__ for e in events))

dumps = monitor_unpack(events)
for d in dumps:
    print(f"dump {d.index}: base {d.base_addr:#x}, {len(d.bytes)} bytes, oep {d.oep_rva:#x}, tick {d.tick_captured}")
print("last dump == original payload:", dumps[-1].bytes[:n] == reference_unpack(sample, r))

# %% [markdown]
# A full analysis stops 30 ticks after the first dump, so later layers of a slow
# multi-layer sample are not in the container. Plain programs never write code and time out.

# %%
for label, blob in (("3-layer", sample), ("1-layer", pack(base, PackRecipe(3, 1, 42))), ("plain", base)):
    c = run_analysis(blob)
    print(f"{label}: {c.outcome}, {len(c.dumps)} dump(s), {c.duration_ticks} ticks")
print("\n".join(c.log))

# %% [markdown]
# Three sandbox slots over a mixed batch.

# %%
samples = [d for d, _ in iter_corpus(CorpusSpec(plain=3, packed=9, corrupt=2), 8)]
for workers in (1, 3):
    res = orchestrate(samples, SandboxConfig(workers=workers))
    print(f"workers={workers}: total {res.total_ticks} ticks, outcomes {Counter(c.outcome for c in res.containers)}")
