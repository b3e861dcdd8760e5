# %% [markdown]
# # Sending 60% of a model before the deadline
#
# A UE needs a ~10 MB model within 200 ms over a 240 Mbps link.  The whole
# model does not fit (80 Mbit > 48 Mbit), so the endpoint sends the largest
# prefix that does, and the rest later when the UE asks for an upgrade.

# %%
from accordion import ArchSpec, DepthConfig, Scheme, build, size_of
from accordion import protocol
from accordion.profile import ProfileEntry, ProfileTable

spec = ArchSpec(input_dim=999, block_widths=(249, 249, 249), units_per_block=6,
                num_classes=24, bits_per_param=32)
model = build(spec, seed=0)
full = size_of(model, DepthConfig.full(spec))
print(f"{full.param_count} parameters, {full.size_bits / 8e6:.2f} MB")

# %%
# The untrained model has no meaningful error rates, so the table carries a
# made-up curve that improves with depth.  Sizes are the real ones.
entries = []
for n in range(1, spec.total_units + 1):
    rep = size_of(model, DepthConfig(Scheme.COML, n))
    entries.append(ProfileEntry("coml", n, rep.size_bits, rep.mac_count, rep.layer_fraction,
                                0.03 + 0.5 * (spec.total_units - n) / spec.total_units))
endpoint = protocol.Endpoint(model, ProfileTable("demo", entries))

# %%
scenario = protocol.Scenario(
    link=protocol.LinkModel(throughput_bps=240e6, rtt_s=0.0),
    requirements=protocol.Requirements(deadline_ms=200, throughput_bps=240_000_000),
    upgrades=(protocol.UpgradeEvent(at_s=1.0, target_n=spec.total_units),),
)
log = protocol.simulate_session(endpoint, scenario)
for row in log.rows:
    if row.event != "chunk":
        print(f"{row.time_s:8.4f} s  {row.event:16s} n={row.achievable_n}")
first = log.events("transfer_done")[0]
print(f"initial model: {log.offer.n} of {spec.total_units} units, "
      f"{size_of(model, DepthConfig(Scheme.COML, log.offer.n)).size_fraction:.1%} of the bytes, "
      f"ready at {first.time_s} s")
print(f"total payload {log.total_payload_bits} bits = full model {full.size_bits} bits")
