"""Machine-readable report output: metrics.json (deterministic, floats at 17
significant digits), histograms.csv, markdown tables and standalone SVG
histograms rendered purely from the metrics file.
"""

import json
from pathlib import Path

import numpy as np

METRICS_SCHEMA_VERSION = 1


def _fmt_float(x):
    if x != x:
        return "NaN"
    if x in (float("inf"), float("-inf")):
        return '"%s"' % x
    return format(x, ".17g")


def dumps_17g(obj, indent=0):
    """JSON text with every float serialized at 17 significant digits and
    dict keys kept in insertion order; output is byte-deterministic."""
    pad = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [
            '%s  "%s": %s' % (pad, k, dumps_17g(v, indent + 1))
            for k, v in obj.items()
        ]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        items = [pad + "  " + dumps_17g(v, indent + 1) for v in seq]
        return "[\n" + ",\n".join(items) + "\n" + pad + "]"
    if isinstance(obj, bool) or isinstance(obj, np.bool_):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(float(obj))
    if obj is None:
        return "null"
    return json.dumps(str(obj))


def report_to_metrics(report, config_hash="", calibration=None, param_counts=None):
    """Flatten a BenchmarkReport into the metrics.json structure."""
    doc = {
        "schema_version": METRICS_SCHEMA_VERSION,
        "config_hash": config_hash,
        "seed": report.seed,
        "config": report.config,
        "methods": {},
    }
    for method, cells in report.methods.items():
        block = {
            "auroc": {"%s:%d" % (c.corruption, c.severity): c.auroc for c in cells},
            "fpr95": {"%s:%d" % (c.corruption, c.severity): c.fpr95 for c in cells},
            "mauroc": report.aggregates[method]["mauroc"],
            "mfpr95": report.aggregates[method]["mfpr95"],
        }
        if method in report.region_methods:
            rc = report.region_methods[method]
            block["region_auroc"] = {"%s:%d" % (c.corruption, c.severity): c.auroc
                                     for c in rc}
            block["region_fpr95"] = {"%s:%d" % (c.corruption, c.severity): c.fpr95
                                     for c in rc}
            block["region_mauroc"] = report.region_aggregates[method]["mauroc"]
            block["region_mfpr95"] = report.region_aggregates[method]["mfpr95"]
        if param_counts and method in param_counts:
            block["param_count"] = param_counts[method]
        if calibration and method in calibration:
            block["calibration"] = calibration[method]
        doc["methods"][method] = block
    return doc


def write_metrics(doc, path):
    Path(path).write_text(dumps_17g(doc) + "\n")


def write_timings(report, path):
    # timings are wall-clock and intentionally kept out of metrics.json so
    # that the primary output stays byte-identical across runs
    Path(path).write_text(dumps_17g({"per_method_seconds": report.timings}) + "\n")


def write_histograms_csv(report, path):
    lines = ["method,corruption,severity,bin_left,bin_right,count_id,count_ood"]
    for h in report.histograms:
        edges = h["edges"]
        for b in range(len(h["count_id"])):
            lines.append("%s,%s,%d,%s,%s,%d,%d" % (
                h["method"], h["corruption"], h["severity"],
                format(edges[b], ".17g"), format(edges[b + 1], ".17g"),
                h["count_id"][b], h["count_ood"][b]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_histograms_csv(path):
    rows = []
    lines = Path(path).read_text().strip().split("\n")
    for line in lines[1:]:
        method, corruption, severity, left, right, cid, cood = line.split(",")
        rows.append({"method": method, "corruption": corruption,
                     "severity": int(severity), "bin_left": float(left),
                     "bin_right": float(right), "count_id": int(cid),
                     "count_ood": int(cood)})
    return rows


# -- markdown tables -------------------------------------------------------

def ood_table_markdown(doc):
    lines = [
        "| Method | mAUROC | mFPR95 | Region mAUROC | Region mFPR95 |",
        "|---|---|---|---|---|",
    ]
    for method, block in doc["methods"].items():
        lines.append("| %s | %.4f | %.4f | %s | %s |" % (
            method, block["mauroc"], block["mfpr95"],
            "%.4f" % block["region_mauroc"] if "region_mauroc" in block else "-",
            "%.4f" % block["region_mfpr95"] if "region_mfpr95" in block else "-"))
    return "\n".join(lines) + "\n"


def calibration_table_markdown(doc):
    lines = [
        "| Method | Variant | ECE (clean) | NLL (clean) | mECE (corrupt) | mNLL (corrupt) |",
        "|---|---|---|---|---|---|",
    ]
    for method, block in doc["methods"].items():
        cal = block.get("calibration")
        if not cal:
            continue
        for variant in ("raw", "ts", "ugts"):
            clean = cal["clean"][variant]
            corrupt = cal["corrupted"][variant]
            lines.append("| %s | %s | %.4f | %.4f | %.4f | %.4f |" % (
                method, variant, clean["ece"], clean["nll"],
                corrupt["mece"], corrupt["mnll"]))
    return "\n".join(lines) + "\n"


def ablation_table_markdown(rows):
    lines = ["| Layers | Skip | mAUROC | mFPR95 | Params |", "|---|---|---|---|---|"]
    for r in rows:
        lines.append("| %d | %s | %.4f | %.4f | %d |" % (
            r["layers"], "yes" if r["skip"] else "no",
            r["mauroc"], r["mfpr95"], r["params"]))
    return "\n".join(lines) + "\n"


def dim_sweep_table_markdown(rows):
    lines = ["| Dim | mAUROC | mFPR95 | GMM params |", "|---|---|---|---|"]
    for r in rows:
        lines.append("| %d | %.4f | %.4f | %d |" % (
            r["dim"], r["mauroc"], r["mfpr95"], r["gmm_params"]))
    return "\n".join(lines) + "\n"


# -- SVG histograms --------------------------------------------------------

SVG_W, SVG_H, SVG_MARGIN = 480, 240, 30


def histogram_svg(rows):
    """Standalone SVG for one (method, corruption, severity) cell; counts are
    embedded as metadata attributes so renderings remain verifiable."""
    n = len(rows)
    max_count = max(max(r["count_id"], r["count_ood"]) for r in rows) or 1
    lo = rows[0]["bin_left"]
    hi = rows[-1]["bin_right"]
    span = hi - lo or 1.0
    plot_w = SVG_W - 2 * SVG_MARGIN
    plot_h = SVG_H - 2 * SVG_MARGIN
    parts = [
        '<svg xmlns="http://www.w3.org/2000/svg" width="%d" height="%d">'
        % (SVG_W, SVG_H),
        '<metadata id="counts" data-count-id="%s" data-count-ood="%s"/>' % (
            ";".join(str(r["count_id"]) for r in rows),
            ";".join(str(r["count_ood"]) for r in rows)),
        '<rect width="%d" height="%d" fill="white"/>' % (SVG_W, SVG_H),
    ]
    for key, color in (("count_id", "#d62728"), ("count_ood", "#1f77b4")):
        for r in rows:
            x0 = SVG_MARGIN + (r["bin_left"] - lo) / span * plot_w
            w = (r["bin_right"] - r["bin_left"]) / span * plot_w
            h = r[key] / max_count * plot_h
            y0 = SVG_H - SVG_MARGIN - h
            parts.append(
                '<rect x="%.3f" y="%.3f" width="%.3f" height="%.3f" '
                'fill="%s" fill-opacity="0.55"/>' % (x0, y0, w, h, color))
    parts.append('<line x1="%d" y1="%d" x2="%d" y2="%d" stroke="black"/>' % (
        SVG_MARGIN, SVG_H - SVG_MARGIN, SVG_W - SVG_MARGIN, SVG_H - SVG_MARGIN))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def render_report(metrics_path, histograms_path, out_dir):
    """Render markdown tables and per-cell SVGs from metrics.json +
    histograms.csv. Returns the list of files written."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = json.loads(Path(metrics_path).read_text())
    if doc.get("schema_version") != METRICS_SCHEMA_VERSION:
        raise ValueError("metrics schema version mismatch")
    written = []
    tables = out_dir / "tables.md"
    body = "# Benchmark tables\n\n" + ood_table_markdown(doc)
    if any("calibration" in b for b in doc["methods"].values()):
        body += "\n" + calibration_table_markdown(doc)
    if not doc["methods"]:
        body += "\nno cells\n"
    tables.write_text(body)
    written.append(tables)
    if Path(histograms_path).exists():
        rows = read_histograms_csv(histograms_path)
        cells = {}
        for r in rows:
            cells.setdefault((r["method"], r["corruption"], r["severity"]),
                             []).append(r)
        for (method, corruption, severity), cell_rows in sorted(cells.items()):
            name = "hist_%s_%s_s%d.svg" % (method.replace(":", "_"),
                                           corruption, severity)
            path = out_dir / name
            path.write_text(histogram_svg(cell_rows))
            written.append(path)
    return written
