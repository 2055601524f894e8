"""A small cold-start ablation, end to end.

Builds a reduced benchmark (300 items, 20k events), trains three model
variants and compares their AUC on the warm and cold item slices. The
full-size five-variant comparison lives behind `sidctr ablate`; this demo
keeps the runtime to roughly a minute while showing the same mechanics.

Run:  python3 demos/02_cold_start_ablation.py
"""

from sidctr import evaluation, model as M


def main():
    print("Preparing benchmark (300 items, 100 users, 20k events)...")
    bench = evaluation.prepare_benchmark(
        n_items=300, n_users=100, n_queries=50, n_events=20_000,
        rq_K=8, opq_K=32, seed=0, opq_iters=10)
    n_cold = sum(1 for v in bench.item_labels.values() if v == "cold")
    print(f"  {n_cold} of {len(bench.item_labels)} items labeled cold; "
          f"{len(bench.train_ds)} train rows, {len(bench.test_ds)} test "
          f"rows\n")

    hp = M.HyperParams(epochs=2)
    variants = ("only_sid", "iid_sid", "smile")
    print(f"{'variant':>10} {'all AUC':>9} {'warm AUC':>9} {'cold AUC':>9}")
    for variant in variants:
        rep, _ = evaluation.train_and_evaluate(bench, variant, seed=0, hp=hp)
        row = {sl: rep.slices.get(sl, {}).get("auc", float("nan"))
               for sl in ("All", "Warm", "Cold")}
        print(f"{variant:>10} {row['All']:9.4f} {row['Warm']:9.4f} "
              f"{row['Cold']:9.4f}")

    print("\nReading the table:")
    print(" - only_sid ranks items purely from their content-derived codes;")
    print("   it generalizes to unseen items but cannot express per-item")
    print("   quality that content does not reveal.")
    print(" - iid_sid adds a per-item id embedding, which helps items that")
    print("   accumulated some traffic before going quiet.")
    print(" - smile routes between the two channels with a traffic-aware")
    print("   gate and distills id knowledge into the code embeddings,")
    print("   which is where the cold-slice gains come from.")
    print("\nNote: at this reduced scale single-seed differences are noisy;")
    print("the shipped acceptance run uses the full benchmark and 5 seeds.")


if __name__ == "__main__":
    main()
