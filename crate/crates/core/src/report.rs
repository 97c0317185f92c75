//! Standalone SVG 1.1 figures: needle plots of a diagnostic statistic,
//! the `Ci_b` vs `Ci_d` scatter, and period-count trajectories.
//!
//! Output is a pure function of the inputs. Coordinates are printed with
//! two decimals and elements are emitted in a fixed order.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{PanelDataset, PERIODS};
use crate::influence::{DiagnosticRecord, Stat};

pub const WIDTH: f64 = 640.0;
pub const HEIGHT: f64 = 480.0;
pub const FONT_SIZE: f64 = 12.0;
pub const RED: &str = "#D62728";
pub const BLACK: &str = "#000000";
const GREY: &str = "#888888";

const MARGIN_LEFT: f64 = 64.0;
const MARGIN_RIGHT: f64 = 16.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 56.0;
const FACET_GAP: f64 = 48.0;

/// Subjects per arm in a balanced selection.
pub const PER_ARM: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("need at least {needed} subjects in arm trt={arm}, found {found}")]
    TooFewSubjects { arm: u8, needed: usize, found: usize },
    #[error("no records to plot")]
    Empty,
    #[error("statistic `{0}` has non-finite values")]
    NonFinite(String),
    #[error("subject {0} is not in the panel")]
    BadTarget(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    #[default]
    All,
    /// Ten subjects per treatment arm.
    Balanced20,
}

impl std::str::FromStr for SelectionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "all" => Ok(SelectionMode::All),
            "balanced20" | "balanced-20" | "balanced_20" => Ok(SelectionMode::Balanced20),
            other => Err(format!("unknown selection `{other}` (expected all or balanced20)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PlotSelection {
    pub mode: SelectionMode,
    /// Seeds the balanced draw.
    pub seed: u64,
    /// Subject ids drawn in red.
    pub highlight: Vec<u32>,
}

/// Records to draw, sorted by id within arm.
pub fn select<'a>(
    records: &'a [DiagnosticRecord],
    sel: &PlotSelection,
) -> Result<Vec<&'a DiagnosticRecord>, ReportError> {
    if records.is_empty() {
        return Err(ReportError::Empty);
    }
    let mut out = Vec::new();
    for arm in [0u8, 1] {
        let mut members: Vec<&DiagnosticRecord> = records.iter().filter(|r| r.trt == arm).collect();
        members.sort_by_key(|r| r.id);
        if sel.mode == SelectionMode::Balanced20 {
            if members.len() < PER_ARM {
                return Err(ReportError::TooFewSubjects {
                    arm,
                    needed: PER_ARM,
                    found: members.len(),
                });
            }
            let mut rng = ChaCha20Rng::seed_from_u64(sel.seed ^ u64::from(arm));
            members.shuffle(&mut rng);
            members.truncate(PER_ARM);
            members.sort_by_key(|r| r.id);
        }
        out.extend(members);
    }
    Ok(out)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Value range padded for display; degenerate ranges fall back to [0, 1].
fn axis_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (0.0_f64, 0.0_f64);
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi - lo <= 0.0 {
        return (0.0, 1.0);
    }
    (lo, hi + 0.05 * (hi - lo))
}

fn tick_label(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 {
        "0".into()
    } else if (1e-2..1e5).contains(&a) {
        let s = format!("{v:.2}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.2e}")
    }
}

struct Svg {
    buf: String,
}

impl Svg {
    fn new(title: &str) -> Self {
        let mut buf = String::new();
        buf.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
        let _ = writeln!(
            buf,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"{FONT_SIZE}\">"
        );
        let _ = writeln!(buf, "<title>{}</title>", escape(title));
        let _ = writeln!(
            buf,
            "<rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"#FFFFFF\"/>"
        );
        Self { buf }
    }

    fn text(&mut self, x: f64, y: f64, anchor: &str, class: &str, body: &str) {
        let _ = writeln!(
            self.buf,
            "<text class=\"{class}\" x=\"{x:.2}\" y=\"{y:.2}\" text-anchor=\"{anchor}\">{}</text>",
            escape(body)
        );
    }

    fn line(&mut self, class: &str, x1: f64, y1: f64, x2: f64, y2: f64, color: &str, width: f64) {
        let _ = writeln!(
            self.buf,
            "<line class=\"{class}\" x1=\"{x1:.2}\" y1=\"{y1:.2}\" x2=\"{x2:.2}\" y2=\"{y2:.2}\" stroke=\"{color}\" stroke-width=\"{width}\"/>"
        );
    }

    fn finish(mut self) -> String {
        self.buf.push_str("</svg>\n");
        self.buf
    }
}

/// Plot rectangle in canvas units.
#[derive(Clone, Copy)]
struct Frame {
    left: f64,
    right: f64,
    top: f64,
    bottom: f64,
    y_lo: f64,
    y_hi: f64,
}

impl Frame {
    fn y(&self, v: f64) -> f64 {
        self.bottom - (v - self.y_lo) / (self.y_hi - self.y_lo) * (self.bottom - self.top)
    }

    fn draw_axes(&self, svg: &mut Svg, y_ticks: bool) {
        svg.line("axis", self.left, self.bottom, self.right, self.bottom, BLACK, 1.0);
        svg.line("axis", self.left, self.top, self.left, self.bottom, BLACK, 1.0);
        if y_ticks {
            for k in 0..=4 {
                let v = self.y_lo + (self.y_hi - self.y_lo) * k as f64 / 4.0;
                let y = self.y(v);
                svg.line("tick", self.left - 4.0, y, self.left, y, BLACK, 1.0);
                svg.text(self.left - 6.0, y + 4.0, "end", "tick-label", &tick_label(v));
            }
        }
    }
}

/// Vertical needles per subject, one facet per treatment arm.
pub fn needle_plot(
    records: &[DiagnosticRecord],
    stat: Stat,
    sel: &PlotSelection,
) -> Result<String, ReportError> {
    let chosen = select(records, sel)?;
    if chosen.iter().any(|r| !stat.of(r).is_finite()) {
        return Err(ReportError::NonFinite(stat.name().to_string()));
    }
    let (y_lo, y_hi) = axis_range(chosen.iter().map(|r| stat.of(r)));
    let mut svg = Svg::new(&format!("Needle plot of {}", stat.name()));
    svg.text(WIDTH / 2.0, 20.0, "middle", "title", stat.name());
    svg.text(
        16.0,
        HEIGHT / 2.0,
        "middle",
        "axis-label",
        stat.name(),
    );

    let facet_width = (WIDTH - MARGIN_LEFT - MARGIN_RIGHT - FACET_GAP) / 2.0;
    for arm in [0u8, 1] {
        let left = MARGIN_LEFT + arm as f64 * (facet_width + FACET_GAP);
        let frame = Frame {
            left,
            right: left + facet_width,
            top: MARGIN_TOP,
            bottom: HEIGHT - MARGIN_BOTTOM,
            y_lo,
            y_hi,
        };
        frame.draw_axes(&mut svg, arm == 0);
        svg.text(
            left + facet_width / 2.0,
            MARGIN_TOP - 8.0,
            "middle",
            "facet-label",
            &format!("trt = {arm}"),
        );
        svg.text(
            left + facet_width / 2.0,
            HEIGHT - 12.0,
            "middle",
            "axis-label",
            "subject",
        );
        let members: Vec<&&DiagnosticRecord> = chosen.iter().filter(|r| r.trt == arm).collect();
        let n = members.len();
        let label_every = n.div_ceil(15).max(1);
        let _ = writeln!(svg.buf, "<g class=\"facet\" data-trt=\"{arm}\">");
        for (k, r) in members.iter().enumerate() {
            let x = left + facet_width * (k as f64 + 0.5) / n as f64;
            let red = sel.highlight.contains(&r.id);
            let color = if red { RED } else { BLACK };
            let zero = frame.y(0.0);
            let top = frame.y(stat.of(r));
            let _ = writeln!(
                svg.buf,
                "<line class=\"needle\" data-id=\"{}\" x1=\"{x:.2}\" y1=\"{zero:.2}\" x2=\"{x:.2}\" y2=\"{top:.2}\" stroke=\"{color}\" stroke-width=\"2\"/>",
                r.id
            );
            if k % label_every == 0 {
                svg.text(x, frame.bottom + 16.0, "middle", "tick-label", &r.id.to_string());
            }
        }
        svg.buf.push_str("</g>\n");
    }
    Ok(svg.finish())
}

/// `Ci_b` against `Ci_d`, each point labelled with its subject id.
pub fn scatter_plot(records: &[DiagnosticRecord], sel: &PlotSelection) -> Result<String, ReportError> {
    let chosen = select(records, sel)?;
    for r in &chosen {
        if !r.ci_b.is_finite() {
            return Err(ReportError::NonFinite("Ci_b".into()));
        }
        if !r.ci_d.is_finite() {
            return Err(ReportError::NonFinite("Ci_d".into()));
        }
    }
    let (x_lo, x_hi) = axis_range(chosen.iter().map(|r| r.ci_b));
    let (y_lo, y_hi) = axis_range(chosen.iter().map(|r| r.ci_d));
    let frame = Frame {
        left: MARGIN_LEFT,
        right: WIDTH - MARGIN_RIGHT,
        top: MARGIN_TOP,
        bottom: HEIGHT - MARGIN_BOTTOM,
        y_lo,
        y_hi,
    };
    let x_of = |v: f64| frame.left + (v - x_lo) / (x_hi - x_lo) * (frame.right - frame.left);

    let mut svg = Svg::new("Scatter of Ci_b against Ci_d");
    svg.text(WIDTH / 2.0, 20.0, "middle", "title", "Ci_d vs Ci_b");
    frame.draw_axes(&mut svg, true);
    for k in 0..=4 {
        let v = x_lo + (x_hi - x_lo) * k as f64 / 4.0;
        let x = x_of(v);
        svg.line("tick", x, frame.bottom, x, frame.bottom + 4.0, BLACK, 1.0);
        svg.text(x, frame.bottom + 16.0, "middle", "tick-label", &tick_label(v));
    }
    svg.text(WIDTH / 2.0, HEIGHT - 12.0, "middle", "axis-label", "Ci_b");
    svg.text(16.0, HEIGHT / 2.0, "middle", "axis-label", "Ci_d");
    for r in &chosen {
        let (x, y) = (x_of(r.ci_b), frame.y(r.ci_d));
        let color = if sel.highlight.contains(&r.id) { RED } else { BLACK };
        let _ = writeln!(
            svg.buf,
            "<circle class=\"point\" data-id=\"{}\" cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"3\" fill=\"{color}\"/>",
            r.id
        );
        svg.text(x + 5.0, y - 5.0, "start", "label", &r.id.to_string());
    }
    Ok(svg.finish())
}

/// Period-count polylines: the highlighted subject in red and `others`
/// subjects, chosen by a seeded shuffle, in black.
pub fn trajectory_plot(
    panel: &PanelDataset,
    highlight: u32,
    others: usize,
    seed: u64,
) -> Result<String, ReportError> {
    let pos = panel.position_of(highlight).ok_or(ReportError::BadTarget(highlight))?;
    let mut pool: Vec<usize> = (0..panel.len()).filter(|&k| k != pos).collect();
    if others > pool.len() {
        return Err(ReportError::TooFewSubjects {
            arm: 2,
            needed: others + 1,
            found: panel.len(),
        });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    pool.truncate(others);
    pool.sort_unstable();

    let subjects = panel.subjects();
    let drawn: Vec<usize> = pool.iter().copied().chain(std::iter::once(pos)).collect();
    let (y_lo, y_hi) = axis_range(drawn.iter().flat_map(|&k| subjects[k].y.iter().map(|&v| v as f64)));
    let frame = Frame {
        left: MARGIN_LEFT,
        right: WIDTH - MARGIN_RIGHT,
        top: MARGIN_TOP,
        bottom: HEIGHT - MARGIN_BOTTOM,
        y_lo,
        y_hi,
    };
    let x_of = |j: usize| frame.left + (frame.right - frame.left) * (j as f64 + 0.5) / PERIODS as f64;

    let mut svg = Svg::new(&format!("Period counts, subject {highlight} highlighted"));
    svg.text(WIDTH / 2.0, 20.0, "middle", "title", "seizure counts by period");
    frame.draw_axes(&mut svg, true);
    for j in 0..PERIODS {
        svg.text(x_of(j), frame.bottom + 16.0, "middle", "tick-label", &(j + 1).to_string());
    }
    svg.text(WIDTH / 2.0, HEIGHT - 12.0, "middle", "axis-label", "period");
    svg.text(16.0, HEIGHT / 2.0, "middle", "axis-label", "count");
    // The highlighted subject is drawn last so it sits on top.
    for &k in &drawn {
        let s = &subjects[k];
        let color = if k == pos { RED } else { BLACK };
        let points: Vec<String> = s
            .y
            .iter()
            .enumerate()
            .map(|(j, &v)| format!("{:.2},{:.2}", x_of(j), frame.y(v as f64)))
            .collect();
        let _ = writeln!(
            svg.buf,
            "<polyline class=\"trajectory\" data-id=\"{}\" points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"{}\"/>",
            s.id,
            points.join(" "),
            if k == pos { 2.5 } else { 1.0 }
        );
    }
    let _ = writeln!(
        svg.buf,
        "<text class=\"legend\" x=\"{:.2}\" y=\"{:.2}\" fill=\"{GREY}\" text-anchor=\"end\">subject {highlight} in red</text>",
        frame.right,
        MARGIN_TOP - 8.0
    );
    Ok(svg.finish())
}

/// File name `{dataset}_{stat}_{method}.svg`.
pub fn figure_name(dataset: &str, stat: &str, method: &str) -> String {
    format!("{dataset}_{stat}_{method}.svg")
}
