"""Receptive field, delay and cost of the 7-block model for each lookahead."""
from s1dcnn.network import count_macs, count_params, output_delay, paper_config, receptive_field

print(f"{'L':>2} {'past ms':>8} {'future ms':>10} {'delay ms':>9} {'params':>7} {'MACs':>6}")
for L in range(5):
    cfg = paper_config(L)
    past, future = receptive_field(cfg)
    print(f"{L:>2} {past:>8} {future:>10} {output_delay(cfg):>9} {count_params(cfg).total:>7} {count_macs(cfg):>6}")

# lookahead moves frames from the past side to the future side; the total window is fixed
cfg = paper_config()
total = sum(receptive_field(cfg)) // cfg.hop_ms + 1
print("\nframes in the window, any L:", total)

svdf = count_params(paper_config(arch="svdf"))
s1 = count_params(paper_config())
print("\nparameter breakdown (s1dcnn):", s1)
print("parameter breakdown (svdf):  ", svdf)
print("difference = 2 biases x 32 filters x 7 blocks =", s1.total - svdf.total)
