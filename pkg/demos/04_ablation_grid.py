"""Ablation-grid walkthrough on a reduced grid.

Runs a small slice of the shots x docs x adapter x noise grid over the
bundled task suites with the fast n-gram backend, then prints the same
tables the full report renders.  The full 72-cell grid on the toy
transformer is `run_grid()` with defaults (or `toollab run-grid`).
"""

from toollab.harness import GridCell, default_grid, emit_report, run_grid

cells = tuple(
    cell for cell in default_grid(shot_levels=(0, 3, 5), noise_levels=(0, 2))
    if not cell.hypernet_on  # the n-gram backend has no adapter slot
)
print(f"running {len(cells)} cells x 4 families x 5 tasks ...")
report = run_grid(seed=42, cells=cells, backend="ngram", tasks_per_family=5)
print(f"done in {report.wall_time_s:.1f}s; content hash {report.content_hash()[:16]}…")

print("\nsuccess rate by shot count (docs on, no noise):")
for shots, row in report.table_shot_sweep().items():
    cells_str = "  ".join(f"{fam}={row[fam]:.2f}" for fam in report.families)
    print(f"  {shots} shots: {cells_str}")

print("\nsuccess rate with and without documentation:")
for label, row in report.table_docs().items():
    cells_str = "  ".join(f"{fam}={row[fam]:.2f}" for fam in report.families)
    print(f"  {label:8s}: {cells_str}")

print("\nsuccess rate by example-corruption level:")
for noise, row in report.table_noise().items():
    cells_str = "  ".join(f"{fam}={row[fam]:.2f}" for fam in report.families)
    print(f"  {noise} corrupt: {cells_str}")

print("\nerror categories:")
for fam, row in report.table_errors().items():
    print(f"  {fam:4s}: success={row['success']}  semantic={row['semantic']}  "
          f"format={row['format']}  empty={row['empty']}")

out = emit_report(report, "demo_grid_report")
print(f"\nmarkdown report written to {out}")
