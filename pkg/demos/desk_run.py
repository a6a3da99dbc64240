"""Train and evaluate the full pipeline on the reference phantom corpora.

Prints the CNN-only versus CNN+Bi-RNN comparison. Takes about 20 minutes
on one core.

    python3 demos/desk_run.py [run_dir]
"""
import logging
import sys
import time

from spinemark.config import desk_scale
from spinemark.pipeline import default_corpora, run_end_to_end

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
run_dir = sys.argv[1] if len(sys.argv) > 1 else "desk_run"

start = time.perf_counter()
report = run_end_to_end(desk_scale(), *default_corpora(), run_dir)
minutes = (time.perf_counter() - start) / 60

print(f"\n{'':24}{'CNN only':>10}{'CNN+Bi-RNN':>12}")


def fmt(v):
    return f"{v:.3f}" if v is not None else "-"


rows = [("identification rate", lambda r: r["id_rate_all"])]
rows += [(f"  {region}", lambda r, g=region: r[g]["id_rate"]) for region in ("cervical", "thoracic", "lumbar")]
rows += [("localization mean (mm)", lambda r: r["loc_mean_mm"]),
         ("localization mean (vox)", lambda r: r["loc_mean_vox"])]
for name, get in rows:
    print(f"{name:24}{fmt(get(report['cnn_only'])):>10}{fmt(get(report['cnn_birnn'])):>12}")
print(f"sample classification accuracy {report['cnn_birnn']['sample_cls_accuracy']:.3f}")
print(f"finished in {minutes:.1f} min; outputs in {run_dir}/")
