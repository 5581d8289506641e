//! CSV parsing and deterministic SVG rendering (line charts, histograms).
//!
//! No raster dependencies: output bytes depend only on the input data and the
//! size flags, so plots can be diffed and tested structurally.

use fmsd::{Error, Result};

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// Parse a numeric CSV with a header row. Errors carry 1-based line numbers.
pub fn parse_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = text.lines().enumerate();
    let (_, header_line) = lines
        .next()
        .ok_or_else(|| Error::Format("empty CSV: no header row".into()))?;
    let header: Vec<String> = header_line.split(',').map(|s| s.trim().to_string()).collect();
    if header.is_empty() || header.iter().all(|h| h.is_empty()) {
        return Err(Error::Format("empty CSV header".into()));
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != header.len() {
            return Err(Error::Format(format!(
                "line {}: {} fields, header has {}",
                i + 1,
                fields.len(),
                header.len()
            )));
        }
        let mut row = Vec::with_capacity(fields.len());
        for f in fields {
            row.push(f.trim().parse::<f64>().map_err(|_| {
                Error::Format(format!("line {}: `{}` is not a number", i + 1, f.trim()))
            })?);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Format("CSV has a header but no data rows".into()));
    }
    Ok((header, rows))
}

#[derive(Clone, Copy, Debug)]
pub struct PlotSize {
    pub width: usize,
    pub height: usize,
}

impl Default for PlotSize {
    fn default() -> Self {
        PlotSize {
            width: 800,
            height: 500,
        }
    }
}

struct Frame {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    xmin: f64,
    xmax: f64,
    ymin: f64,
    ymax: f64,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        if self.xmax == self.xmin {
            self.x0 + self.w / 2.0
        } else {
            self.x0 + (v - self.xmin) / (self.xmax - self.xmin) * self.w
        }
    }

    fn y(&self, v: f64) -> f64 {
        if self.ymax == self.ymin {
            self.y0 + self.h / 2.0
        } else {
            self.y0 + self.h - (v - self.ymin) / (self.ymax - self.ymin) * self.h
        }
    }
}

fn fmt(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 1e4 || v.abs() < 1e-3 {
        format!("{v:.3e}")
    } else {
        format!("{v:.4}")
    }
}

fn svg_open(size: PlotSize) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
        w = size.width,
        h = size.height
    )
}

fn axes(frame: &Frame) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\" stroke-width=\"1\"/>\n",
        frame.x0,
        frame.y0 + frame.h,
        frame.x0 + frame.w,
        frame.y0 + frame.h
    ));
    out.push_str(&format!(
        "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\" stroke-width=\"1\"/>\n",
        frame.x0,
        frame.y0,
        frame.x0,
        frame.y0 + frame.h
    ));
    out.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\">{}</text>\n",
        frame.x0,
        frame.y0 + frame.h + 16.0,
        fmt(frame.xmin)
    ));
    out.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"end\">{}</text>\n",
        frame.x0 + frame.w,
        frame.y0 + frame.h + 16.0,
        fmt(frame.xmax)
    ));
    out.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\">{}</text>\n",
        4.0,
        frame.y0 + frame.h,
        fmt(frame.ymin)
    ));
    out.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\">{}</text>\n",
        4.0,
        frame.y0 + 12.0,
        fmt(frame.ymax)
    ));
    out
}

/// Line chart: first column is x, every further column is one series.
pub fn line_chart(header: &[String], rows: &[Vec<f64>], size: PlotSize) -> Result<String> {
    if header.len() < 2 {
        return Err(Error::Format("line chart needs an x column and one series".into()));
    }
    let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in rows {
        xmin = xmin.min(r[0]);
        xmax = xmax.max(r[0]);
        for &v in &r[1..] {
            ymin = ymin.min(v);
            ymax = ymax.max(v);
        }
    }
    if !(xmin.is_finite() && ymin.is_finite()) {
        return Err(Error::NonFinite("plot input".into()));
    }
    let frame = Frame {
        x0: 60.0,
        y0: 20.0,
        w: size.width as f64 - 80.0,
        h: size.height as f64 - 60.0,
        xmin,
        xmax,
        ymin,
        ymax,
    };
    let mut svg = svg_open(size);
    svg.push_str(&axes(&frame));
    for (si, name) in header[1..].iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let points: Vec<String> = rows
            .iter()
            .map(|r| format!("{:.2},{:.2}", frame.x(r[0]), frame.y(r[si + 1])))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            points.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" fill=\"{color}\">{}</text>\n",
            frame.x0 + frame.w - 120.0,
            frame.y0 + 14.0 * (si + 1) as f64,
            name
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Histogram chart from `bin_lo, bin_hi, count` rows.
pub fn histogram_chart(header: &[String], rows: &[Vec<f64>], size: PlotSize) -> Result<String> {
    if header.len() < 3 {
        return Err(Error::Format(
            "histogram needs bin_lo, bin_hi, count columns".into(),
        ));
    }
    let xmin = rows.iter().map(|r| r[0]).fold(f64::INFINITY, f64::min);
    let xmax = rows.iter().map(|r| r[1]).fold(f64::NEG_INFINITY, f64::max);
    let ymax = rows.iter().map(|r| r[2]).fold(0.0f64, f64::max);
    if !(xmin.is_finite() && xmax.is_finite()) {
        return Err(Error::NonFinite("histogram input".into()));
    }
    let frame = Frame {
        x0: 60.0,
        y0: 20.0,
        w: size.width as f64 - 80.0,
        h: size.height as f64 - 60.0,
        xmin,
        xmax,
        ymin: 0.0,
        ymax: ymax.max(1.0),
    };
    let mut svg = svg_open(size);
    svg.push_str(&axes(&frame));
    for r in rows {
        let x = frame.x(r[0]);
        let xr = frame.x(r[1]);
        let y = frame.y(r[2]);
        let base = frame.y(0.0);
        svg.push_str(&format!(
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\" stroke=\"white\" stroke-width=\"0.5\"/>\n",
            x,
            y,
            (xr - x).max(0.1),
            (base - y).max(0.0),
            PALETTE[0]
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_line_has_one_polyline() {
        let (h, rows) = parse_csv("x,y\n0,1\n1,2\n").unwrap();
        let svg = line_chart(&h, &rows, PlotSize::default()).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert!(svg.starts_with("<svg xmlns"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn histogram_renders_one_rect_per_bin() {
        let (h, rows) = parse_csv("bin_lo,bin_hi,count\n0,1,5\n1,2,3\n2,3,0\n").unwrap();
        let svg = histogram_chart(&h, &rows, PlotSize::default()).unwrap();
        // Background rect + 3 bars.
        assert_eq!(svg.matches("<rect").count(), 4);
    }

    #[test]
    fn svg_bytes_are_deterministic() {
        let (h, rows) = parse_csv("x,a,b\n0,1,4\n1,2,5\n2,3,6\n").unwrap();
        let a = line_chart(&h, &rows, PlotSize::default()).unwrap();
        let b = line_chart(&h, &rows, PlotSize::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        match parse_csv("x,y\n0,1\n2\n") {
            Err(Error::Format(msg)) => assert!(msg.contains("line 3"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
        match parse_csv("x,y\n0,abc\n") {
            Err(Error::Format(msg)) => assert!(msg.contains("line 2"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn empty_csv_is_rejected() {
        assert!(parse_csv("").is_err());
        assert!(parse_csv("x,y\n").is_err());
    }
}
