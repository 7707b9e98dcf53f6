//! Plain-text renderers: SVG charts, DOT graphs and CSV tables.

use std::fmt::Write as _;

use super::cluster::ClusterTree;
use super::correlation::CorrelationReport;
use super::similarity::SimilarityStats;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Leaves in left-to-right dendrogram order.
pub fn leaf_order(tree: &ClusterTree) -> Vec<usize> {
    let n = tree.n_leaves;
    if n == 0 {
        return Vec::new();
    }
    let mut order = Vec::with_capacity(n);
    let mut stack = vec![2 * n - 2];
    while let Some(node) = stack.pop() {
        if node < n {
            order.push(node);
        } else {
            let m = &tree.merges[node - n];
            stack.push(m.right);
            stack.push(m.left);
        }
    }
    order
}

/// Dendrogram as SVG; leaf labels are drawn when given and `n <= 200`.
pub fn dendrogram_svg(tree: &ClusterTree, labels: Option<&[String]>) -> String {
    let n = tree.n_leaves;
    let (width, height, margin) = (1000.0, 600.0, 40.0);
    let mut svg = String::new();
    writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#).unwrap();
    writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    if n == 0 {
        svg.push_str("</svg>\n");
        return svg;
    }
    let order = leaf_order(tree);
    let step = (width - 2.0 * margin) / n.max(2) as f64;
    let max_d = tree.merges.iter().map(|m| m.distance).fold(0.0f64, f64::max).max(1e-12);
    let y_of = |d: f64| height - margin - (d / max_d) * (height - 3.0 * margin);

    let mut x = vec![0.0; 2 * n];
    let mut y = vec![y_of(0.0); 2 * n];
    for (pos, &leaf) in order.iter().enumerate() {
        x[leaf] = margin + step * (pos as f64 + 0.5);
    }
    writeln!(svg, r##"<g stroke="#1f4e79" stroke-width="1" fill="none">"##).unwrap();
    for (i, m) in tree.merges.iter().enumerate() {
        let id = n + i;
        x[id] = (x[m.left] + x[m.right]) / 2.0;
        y[id] = y_of(m.distance);
        writeln!(
            svg,
            r#"<path d="M{:.2},{:.2}V{:.2}H{:.2}V{:.2}"/>"#,
            x[m.left], y[m.left], y[id], x[m.right], y[m.right]
        )
        .unwrap();
    }
    svg.push_str("</g>\n");
    if let Some(labels) = labels.filter(|_| n <= 200) {
        for &leaf in &order {
            let text = labels.get(leaf).map(String::as_str).unwrap_or("");
            writeln!(
                svg,
                r#"<text x="{:.2}" y="{:.2}" font-size="8" text-anchor="end" transform="rotate(-90 {:.2} {:.2})">{}</text>"#,
                x[leaf],
                height - margin + 4.0,
                x[leaf],
                height - margin + 4.0,
                escape(text)
            )
            .unwrap();
        }
    }
    writeln!(svg, r#"<text x="{margin}" y="20" font-size="12">Ward linkage, {n} leaves, max distance {max_d:.4}</text>"#).unwrap();
    svg.push_str("</svg>\n");
    svg
}

/// Correlogram heat map in `feature_order`; blue positive, red negative.
pub fn correlogram_svg(report: &CorrelationReport) -> String {
    let d = report.matrix.len();
    let cell = 18.0;
    let label_space = 170.0;
    let size = label_space + cell * d as f64 + 10.0;
    let mut svg = String::new();
    writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#).unwrap();
    writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    for (row, &a) in report.feature_order.iter().enumerate() {
        let y = label_space + row as f64 * cell;
        writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="9" text-anchor="end">{}</text>"#,
            label_space - 4.0,
            y + cell * 0.7,
            escape(&report.feature_ids[a])
        )
        .unwrap();
        let x = label_space + row as f64 * cell;
        writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="9" transform="rotate(-90 {:.1} {:.1})">{}</text>"#,
            x + cell * 0.7,
            label_space - 4.0,
            x + cell * 0.7,
            label_space - 4.0,
            escape(&report.feature_ids[a])
        )
        .unwrap();
        for (col, &b) in report.feature_order.iter().enumerate() {
            let r = report.matrix[a][b];
            let color = if r >= 0.0 { "#2166ac" } else { "#b2182b" };
            writeln!(
                svg,
                r#"<rect x="{:.1}" y="{:.1}" width="{cell}" height="{cell}" fill="{color}" fill-opacity="{:.3}"><title>{} / {}: {:.3}</title></rect>"#,
                label_space + col as f64 * cell,
                y,
                r.abs(),
                escape(&report.feature_ids[a]),
                escape(&report.feature_ids[b]),
                r
            )
            .unwrap();
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Positive-correlation graph (edges with `r >= tau`) in DOT.
pub fn correlation_dot(report: &CorrelationReport) -> String {
    let mut dot = String::from("graph positive_correlations {\n  node [shape=ellipse, fontsize=10];\n");
    writeln!(dot, "  label=\"r >= {}\";", report.tau).unwrap();
    for id in &report.feature_ids {
        writeln!(dot, "  \"{}\";", id.replace('"', "\\\"")).unwrap();
    }
    for e in &report.positive_edges {
        writeln!(
            dot,
            "  \"{}\" -- \"{}\" [label=\"{:.2}\", penwidth={:.2}];",
            report.feature_ids[e.a].replace('"', "\\\""),
            report.feature_ids[e.b].replace('"', "\\\""),
            e.r,
            1.0 + 3.0 * e.r
        )
        .unwrap();
    }
    dot.push_str("}\n");
    dot
}

pub fn similarity_histogram_csv(stats: &SimilarityStats) -> String {
    let mut csv = String::from("bin_low,bin_high,count\n");
    for (lo, hi, c) in stats.bins() {
        writeln!(csv, "{lo:.2},{hi:.2},{c}").unwrap();
    }
    csv
}

pub fn similarity_histogram_svg(stats: &SimilarityStats) -> String {
    let (width, height, margin) = (640.0, 360.0, 40.0);
    let bins = stats.bins();
    let max = bins.iter().map(|b| b.2).max().unwrap_or(0).max(1) as f64;
    let bar_w = (width - 2.0 * margin) / bins.len() as f64;
    let mut svg = String::new();
    writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#).unwrap();
    writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    for (i, (lo, hi, c)) in bins.iter().enumerate() {
        let h = (*c as f64 / max) * (height - 2.0 * margin);
        writeln!(
            svg,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#4d7ea8"><title>[{lo:.2}, {hi:.2}): {c}</title></rect>"##,
            margin + i as f64 * bar_w,
            height - margin - h,
            bar_w - 1.0,
            h
        )
        .unwrap();
    }
    writeln!(svg, r#"<text x="{margin}" y="{:.0}" font-size="11">0.0</text>"#, height - margin + 14.0).unwrap();
    writeln!(svg, r#"<text x="{:.0}" y="{:.0}" font-size="11" text-anchor="end">1.0</text>"#, width - margin, height - margin + 14.0).unwrap();
    writeln!(svg, r#"<text x="{margin}" y="20" font-size="12">Pairwise similarity, {} pairs</text>"#, stats.total_pairs()).unwrap();
    svg.push_str("</svg>\n");
    svg
}
