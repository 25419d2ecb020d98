"""Print the classifier's layer table and check the parameter total.

Builds the full-width network and its quarter-width variant, prints the
per-layer output shapes and parameter counts, and shows that the
parameter arrays of a freshly initialised model add up to the same total.

    python3 demos/layer_table.py
"""

from nodule3d import build_network, canonical_spec, small_spec
from nodule3d.network import format_summary


def main():
    spec = canonical_spec()
    print(format_summary(spec))

    model = build_network(spec, seed=0)
    print(f"initialised arrays hold {model.n_params:,} numbers")
    first_w = model.params[0]
    print(f"first conv weights {first_w.shape}, range [{first_w.min():.4f}, {first_w.max():.4f}]")

    print()
    print(format_summary(small_spec()))


if __name__ == "__main__":
    main()
