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
# # Whole chain and batch report
#
# Generate a corpus, run every stage into a fresh repository, then render the
# batch table. The last cell feeds published per-day counts through the same report code.

# %%
import tempfile
from pathlib import Path

from wxunpack.pipeline import Pipeline
from wxunpack.report import BatchReport, render_report
from wxunpack.synth import CorpusSpec, gen_corpus

work = Path(tempfile.mkdtemp(prefix="wxunpack-"))
manifest = gen_corpus(CorpusSpec(plain=20, text=5, lowcode=5, packed=40, corrupt=8), 1, work / "feed")
print(manifest.counts)

pipe = Pipeline(work / "repo")
print(pipe.run(work / "feed"))

# %%
gates = [r for r in pipe.repo.results() if r["stage"] == "gate"]
print(f"{sum(g['status'] == 'accepted' for g in gates)} of {len(gates)} unpacked samples pass the 40% code gate")
print(sorted({f"{p.name.split('.', 1)[1]}" for p in (work / "repo" / "containers").iterdir()}))

# %%
# (pe32, packed, static, corrupt, unpacked); corrupt = packed - static - APF
days = [(90, 36, 14, 8, 11), (84, 61, 1, 41, 15), (100, 64, 5, 35, 15), (82, 41, 1, 21, 6), (99, 72, 1, 46, 15)]
reports = [
    BatchReport.from_counts(p, s, c, d, total_files=100, pe32_files=pe, label=f"day {i}")
    for i, (pe, p, s, c, d) in enumerate(days, 1)
]
print(render_report(reports))
