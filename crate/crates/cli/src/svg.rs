//! Minimal SVG line plots. CSV files are the contract; these are viewing
//! conveniences only.

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

struct Panel<'a> {
    title: &'a str,
    x_label: &'a str,
    y_label: &'a str,
    series: &'a [Series],
}

const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
const W: f64 = 420.0;
const H: f64 = 320.0;
const MARGIN: f64 = 48.0;

fn panel_svg(p: &Panel, x_off: f64) -> String {
    let all: Vec<(f64, f64)> = p.series.iter().flat_map(|s| s.points.iter().copied()).collect();
    if all.is_empty() {
        return String::new();
    }
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in &all {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let pad = (y1 - y0) * 0.05;
    y0 -= pad;
    y1 += pad;

    let sx = |x: f64| x_off + MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let sy = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);

    let mut out = String::new();
    out.push_str(&format!(
        "<rect x='{}' y='{}' width='{}' height='{}' fill='none' stroke='#888'/>\n",
        x_off + MARGIN,
        MARGIN,
        W - 2.0 * MARGIN,
        H - 2.0 * MARGIN
    ));
    out.push_str(&format!(
        "<text x='{}' y='24' text-anchor='middle' font-size='14'>{}</text>\n",
        x_off + W / 2.0,
        p.title
    ));
    out.push_str(&format!(
        "<text x='{}' y='{}' text-anchor='middle' font-size='11'>{}</text>\n",
        x_off + W / 2.0,
        H - 10.0,
        p.x_label
    ));
    out.push_str(&format!(
        "<text x='{}' y='{}' text-anchor='middle' font-size='11' transform='rotate(-90 {} {})'>{}</text>\n",
        x_off + 14.0,
        H / 2.0,
        x_off + 14.0,
        H / 2.0,
        p.y_label
    ));
    for t in 0..=4 {
        let fx = x0 + (x1 - x0) * t as f64 / 4.0;
        let fy = y0 + (y1 - y0) * t as f64 / 4.0;
        out.push_str(&format!(
            "<text x='{}' y='{}' text-anchor='middle' font-size='9'>{:.3}</text>\n",
            sx(fx),
            H - MARGIN + 14.0,
            fx
        ));
        out.push_str(&format!(
            "<text x='{}' y='{}' text-anchor='end' font-size='9'>{:.3}</text>\n",
            x_off + MARGIN - 4.0,
            sy(fy) + 3.0,
            fy
        ));
    }
    for (i, s) in p.series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s.points.iter().map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y))).collect();
        out.push_str(&format!(
            "<polyline points='{}' fill='none' stroke='{}' stroke-width='1.5'/>\n",
            pts.join(" "),
            color
        ));
        out.push_str(&format!(
            "<text x='{}' y='{}' font-size='10' fill='{}'>{}</text>\n",
            x_off + MARGIN + 6.0,
            MARGIN + 14.0 + 13.0 * i as f64,
            color,
            s.label
        ));
    }
    out
}

/// Side-by-side line-plot panels in one SVG document.
pub fn plot(panels: &[(&str, &str, &str, Vec<Series>)]) -> String {
    let total_w = W * panels.len() as f64;
    let mut out = format!(
        "<svg xmlns='http://www.w3.org/2000/svg' width='{total_w}' height='{H}' font-family='sans-serif'>\n"
    );
    out.push_str("<rect width='100%' height='100%' fill='white'/>\n");
    for (i, (title, xl, yl, series)) in panels.iter().enumerate() {
        out.push_str(&panel_svg(
            &Panel { title, x_label: xl, y_label: yl, series },
            W * i as f64,
        ));
    }
    out.push_str("</svg>\n");
    out
}
