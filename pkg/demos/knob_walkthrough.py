"""The demand-balance knob, one update at a time.

Two placement knobs weight where low- and high-impact allocations land
(probability of choosing the fast pool). Under sustained fast-pool
pressure the low knob walks from 1 to 0 in exactly twenty 0.05 steps;
the high knob moves only once the low knob is pinned at its extreme
and the pipeline still has output-delay headroom to spend.
"""
from kpstream.hybridmem import KnobState, update_knob


def main() -> None:
    st = KnobState()
    print("fast pool under pressure (fast demand 1.0, slow 0.0):")
    for step in range(1, 23):
        st = update_knob(st, fast_fraction=1.0, slow_fraction=0.0,
                         headroom_fraction=0.0)
        marker = "  <- low knob exhausted" if st.k_low == 0.0 else ""
        if step <= 21 or marker:
            print(f"  update {step:>2}: k_low={st.k_low:.2f} "
                  f"k_high={st.k_high:.2f}{marker}")
        if st.k_low == 0.0 and step >= 20:
            break

    print("\nno headroom: the high knob stays put")
    held = update_knob(st, 1.0, 0.0, headroom_fraction=0.09)
    print(f"  headroom 9%: k_high={held.k_high:.2f}")
    moved = update_knob(st, 1.0, 0.0, headroom_fraction=0.10)
    print(f"  headroom 10%: k_high={moved.k_high:.2f}  <- gate opens")

    print("\npressure flips (slow demand dominant): the walk reverses")
    back = moved
    for _ in range(3):
        back = update_knob(back, fast_fraction=0.0, slow_fraction=1.0,
                           headroom_fraction=0.0)
    print(f"  after 3 updates: k_low={back.k_low:.2f} k_high={back.k_high:.2f}")

    print("\ninside the dead-band nothing moves:")
    calm = update_knob(back, fast_fraction=0.55, slow_fraction=0.50,
                       headroom_fraction=1.0)
    print(f"  |0.55-0.50| <= 0.10: k_low={calm.k_low:.2f} (unchanged)")


if __name__ == "__main__":
    main()
