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
# # Synthetic packer families and signature unpacking
#
# Three families share a rolling key (k -> 5k+1 mod 256) and differ in the byte transform.
# The built-in signature database only knows families 1 and 2.

# %%
from wxunpack.errors import NotSupported
from wxunpack.pe import parse_pe
from wxunpack.static import DEFAULT_SIGDB, SignatureDb, identify_packer, static_unpack
from wxunpack.synth import FAMILIES, PackRecipe, make_plain_pe, pack, reference_unpack

base = make_plain_pe(11)
payload = parse_pe(base).payload()
print(f"payload {len(payload)} bytes, first 16: {payload[:16].hex()}")

for fid, fam in FAMILIES.items():
    for layers in (1, 3):
        r = PackRecipe(fid, layers, key_seed=1234)
        blob = pack(base, r)
        pay = parse_pe(blob).section(".pay")
        assert reference_unpack(blob, r) == payload
        print(f"family {fid} ({fam.transform.name}) x{layers}: .pay entropy {pay.entropy:.3f}, "
              f"identified as {identify_packer(blob)}")

# %% [markdown]
# Static unpacking either rebuilds a one-section PE or refuses.

# %%
for fid in FAMILIES:
    blob = pack(base, PackRecipe(fid, 2, 77, oep_rva=64))
    try:
        out = parse_pe(static_unpack(blob))
        print(fid, "ok", out.sections[0].data == payload, f"entry {out.entry_point_rva:#x}")
    except NotSupported as exc:
        print(fid, "refused:", exc)

# %% [markdown]
# Signature databases are plain text, so extending support is a one-line change.

# %%
print(DEFAULT_SIGDB.dumps())
wider = SignatureDb.parse(DEFAULT_SIGDB.dumps().replace(" 0\n", " 1\n"))
print(sorted(wider.supported))
