//! Transfer functions for the built-in tools.
//!
//! Every kernel is the identity at its default parameters; [`apply_valid`]
//! returns the input unchanged in that case so the no-op is bit-exact.

use super::call::{ParamValue, ToolCall};
use super::color::{linear_to_srgb, luma, smoothstep, srgb_to_linear};
use super::image::{clamp01, ImageBuffer};
use super::registry::{ColorSpace, ParamKind, ParamSpec, ToolSpec};
use super::ToolError;

const PIXELWISE: &[&str] = &[
    "exposure",
    "contrast",
    "temperature",
    "tint",
    "saturation",
    "vibrance",
    "highlights",
    "shadows",
    "whites_blacks",
    "tone_curve",
];

/// Tools that transform each pixel independently; only these may be wrapped
/// by a mask.
pub fn is_pixelwise(name: &str) -> bool {
    PIXELWISE.contains(&name)
}

fn range(name: &str, min: f64, max: f64, default: f64) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        kind: ParamKind::Range { min, max, default },
    }
}

fn spec(name: &str, space: ColorSpace, semantics: &str, params: Vec<ParamSpec>) -> ToolSpec {
    ToolSpec {
        name: name.into(),
        space,
        semantics: semantics.into(),
        params,
    }
}

fn adjustment() -> ParamSpec {
    ParamSpec {
        name: "adjustment".into(),
        kind: ParamKind::Adjustment,
    }
}

pub fn builtin_specs() -> Vec<ToolSpec> {
    use ColorSpace::*;
    vec![
        spec(
            "exposure",
            Linear,
            "linear light scaled by 2^ev",
            vec![range("ev", -5.0, 5.0, 0.0)],
        ),
        spec(
            "contrast",
            Srgb,
            "0.5 + (v - 0.5) * (1 + c/100)",
            vec![range("c", -100.0, 100.0, 0.0)],
        ),
        spec(
            "temperature",
            Linear,
            "R * (1 + 0.3 t/100), B * (1 - 0.3 t/100)",
            vec![range("t", -100.0, 100.0, 0.0)],
        ),
        spec(
            "tint",
            Linear,
            "G * (1 - 0.3 t/100); positive is magenta",
            vec![range("t", -100.0, 100.0, 0.0)],
        ),
        spec(
            "saturation",
            Srgb,
            "Y + (v - Y) * (1 + s/100), Y = Rec.709 luma",
            vec![range("s", -100.0, 100.0, 0.0)],
        ),
        spec(
            "vibrance",
            Srgb,
            "saturation gain s/100 weighted by (1 - (max - min))",
            vec![range("s", -100.0, 100.0, 0.0)],
        ),
        spec(
            "highlights",
            LuminanceMasked,
            "linear * 2^(h/100 * smoothstep(0.5, 1, Y))",
            vec![range("h", -100.0, 100.0, 0.0)],
        ),
        spec(
            "shadows",
            LuminanceMasked,
            "linear * 2^(s/100 * (1 - smoothstep(0, 0.5, Y)))",
            vec![range("s", -100.0, 100.0, 0.0)],
        ),
        spec(
            "whites_blacks",
            Srgb,
            "(v - b0) / (w0 - b0), w0 = 1 - whites/400, b0 = -blacks/400",
            vec![
                range("whites", -100.0, 100.0, 0.0),
                range("blacks", -100.0, 100.0, 0.0),
            ],
        ),
        spec(
            "tone_curve",
            Srgb,
            "piecewise-linear per channel through monotone control points",
            vec![ParamSpec {
                name: "points".into(),
                kind: ParamKind::Curve { max_points: 8 },
            }],
        ),
        spec(
            "crop",
            Srgb,
            "fractional window; floor origin and size, at least 1x1",
            vec![
                range("x", 0.0, 1.0, 0.0),
                range("y", 0.0, 1.0, 0.0),
                range("w", 0.0, 1.0, 1.0),
                range("h", 0.0, 1.0, 1.0),
            ],
        ),
        spec(
            "rotate",
            Srgb,
            "clockwise rotation by a multiple of 90 degrees",
            vec![ParamSpec {
                name: "angle".into(),
                kind: ParamKind::Choice {
                    options: vec![0.0, 90.0, 180.0, 270.0],
                    default: 0.0,
                },
            }],
        ),
        spec(
            "radial_mask",
            Srgb,
            "elliptical mask, full weight inside (1 - feather), smooth falloff to the rim",
            vec![
                range("cx", 0.0, 1.0, 0.5),
                range("cy", 0.0, 1.0, 0.5),
                range("rx", 0.01, 1.0, 0.5),
                range("ry", 0.01, 1.0, 0.5),
                range("feather", 0.0, 1.0, 0.5),
                adjustment(),
            ],
        ),
        spec(
            "linear_gradient_mask",
            Srgb,
            "weight 1 at (x0,y0) falling linearly to 0 at (x1,y1)",
            vec![
                range("x0", -1.0, 2.0, 0.5),
                range("y0", -1.0, 2.0, 0.0),
                range("x1", -1.0, 2.0, 0.5),
                range("y1", -1.0, 2.0, 1.0),
                adjustment(),
            ],
        ),
    ]
}

/// Checks a (possibly user-supplied) spec against the kernel it names:
/// parameter names and kinds must match and defaults must be the identity.
pub fn check_spec(spec: &ToolSpec) -> Result<(), ToolError> {
    let reference = builtin_specs()
        .into_iter()
        .find(|s| s.name == spec.name)
        .ok_or_else(|| ToolError::Registry(format!("no kernel for tool `{}`", spec.name)))?;
    let bad = |msg: String| Err(ToolError::Registry(format!("{}: {msg}", spec.name)));
    for p in &spec.params {
        let Some(r) = reference.param(&p.name) else {
            return bad(format!("unknown parameter `{}`", p.name));
        };
        match (&p.kind, &r.kind) {
            (
                ParamKind::Range { min, max, default },
                ParamKind::Range {
                    default: identity, ..
                },
            ) => {
                if default != identity || !(min <= default && default <= max) {
                    return bad(format!("`{}` default must be {identity}", p.name));
                }
            }
            (
                ParamKind::Choice { options, default },
                ParamKind::Choice {
                    default: identity, ..
                },
            ) => {
                if default != identity || !options.contains(default) {
                    return bad(format!("`{}` default must be {identity}", p.name));
                }
            }
            (ParamKind::Curve { max_points }, ParamKind::Curve { .. }) => {
                if !(2..=8).contains(max_points) {
                    return bad("max_points must be in 2..=8".into());
                }
            }
            (ParamKind::Adjustment, ParamKind::Adjustment) => {}
            _ => return bad(format!("`{}` has the wrong kind", p.name)),
        }
    }
    if spec.space != reference.space {
        return bad("colour space differs from the kernel".into());
    }
    Ok(())
}

fn num(call: &ToolCall, key: &str, default: f64) -> f64 {
    call.number(key).unwrap_or(default)
}

/// Whether a validated call leaves every pixel unchanged.
pub fn is_identity(call: &ToolCall) -> bool {
    let Some(reference) = builtin_specs().into_iter().find(|s| s.name == call.name) else {
        return false;
    };
    call.params
        .iter()
        .all(|(k, v)| match (reference.param(k).map(|p| &p.kind), v) {
            (Some(ParamKind::Range { default, .. }), ParamValue::Number(x))
            | (Some(ParamKind::Choice { default, .. }), ParamValue::Number(x)) => x == default,
            (Some(ParamKind::Curve { .. }), ParamValue::Curve(pts)) => {
                pts.iter().all(|p| p[0] == p[1])
            }
            (Some(ParamKind::Adjustment), ParamValue::Call(inner)) => is_identity(inner),
            _ => false,
        })
}

type PixelFn = Box<dyn Fn([f64; 3]) -> [f64; 3] + Send + Sync>;

fn linear_gain(gains: [f64; 3]) -> PixelFn {
    Box::new(move |p| {
        let mut out = [0.0; 3];
        for c in 0..3 {
            out[c] = linear_to_srgb(srgb_to_linear(p[c]) * gains[c]);
        }
        out
    })
}

fn mix_with_luma(p: [f64; 3], gain: f64) -> [f64; 3] {
    let y = luma(p);
    p.map(|v| y + (v - y) * gain)
}

fn pixel_fn(call: &ToolCall) -> PixelFn {
    match call.name.as_str() {
        "exposure" => {
            let g = num(call, "ev", 0.0).exp2();
            linear_gain([g; 3])
        }
        "contrast" => {
            let k = 1.0 + num(call, "c", 0.0) / 100.0;
            Box::new(move |p| p.map(|v| 0.5 + (v - 0.5) * k))
        }
        "temperature" => {
            let t = 0.3 * num(call, "t", 0.0) / 100.0;
            linear_gain([1.0 + t, 1.0, 1.0 - t])
        }
        "tint" => {
            let t = 0.3 * num(call, "t", 0.0) / 100.0;
            linear_gain([1.0, 1.0 - t, 1.0])
        }
        "saturation" => {
            let k = 1.0 + num(call, "s", 0.0) / 100.0;
            Box::new(move |p| mix_with_luma(p, k))
        }
        "vibrance" => {
            let s = num(call, "s", 0.0) / 100.0;
            Box::new(move |p| {
                let sat = p.iter().cloned().fold(f64::MIN, f64::max)
                    - p.iter().cloned().fold(f64::MAX, f64::min);
                mix_with_luma(p, 1.0 + s * (1.0 - sat))
            })
        }
        "highlights" => {
            let h = num(call, "h", 0.0) / 100.0;
            Box::new(move |p| {
                let g = (h * smoothstep(0.5, 1.0, luma(p))).exp2();
                p.map(|v| linear_to_srgb(srgb_to_linear(v) * g))
            })
        }
        "shadows" => {
            let s = num(call, "s", 0.0) / 100.0;
            Box::new(move |p| {
                let g = (s * (1.0 - smoothstep(0.0, 0.5, luma(p)))).exp2();
                p.map(|v| linear_to_srgb(srgb_to_linear(v) * g))
            })
        }
        "whites_blacks" => {
            let w0 = 1.0 - num(call, "whites", 0.0) / 400.0;
            let b0 = -num(call, "blacks", 0.0) / 400.0;
            Box::new(move |p| p.map(|v| (v - b0) / (w0 - b0)))
        }
        "tone_curve" => {
            let pts = match call.params.get("points") {
                Some(ParamValue::Curve(pts)) => pts.clone(),
                _ => vec![[0.0, 0.0], [1.0, 1.0]],
            };
            Box::new(move |p| p.map(|v| eval_curve(&pts, v)))
        }
        other => unreachable!("`{other}` is not pixelwise"),
    }
}

fn eval_curve(pts: &[[f64; 2]], v: f64) -> f64 {
    let first = pts[0];
    let last = pts[pts.len() - 1];
    if v <= first[0] {
        return first[1];
    }
    if v >= last[0] {
        return last[1];
    }
    let i = pts.partition_point(|p| p[0] <= v);
    let (a, b) = (pts[i - 1], pts[i]);
    a[1] + (v - a[0]) / (b[0] - a[0]) * (b[1] - a[1])
}

/// Mask weight in `[0,1]` for pixel `(x, y)` of a `w × h` image; mask tools only.
pub fn mask_weight(call: &ToolCall, w: u32, h: u32, x: u32, y: u32) -> f64 {
    let px = (f64::from(x) + 0.5) / f64::from(w);
    let py = (f64::from(y) + 0.5) / f64::from(h);
    match call.name.as_str() {
        "radial_mask" => {
            let dx = (px - num(call, "cx", 0.5)) / num(call, "rx", 0.5);
            let dy = (py - num(call, "cy", 0.5)) / num(call, "ry", 0.5);
            let d = (dx * dx + dy * dy).sqrt();
            let inner = 1.0 - num(call, "feather", 0.5);
            if d <= inner {
                1.0
            } else if d >= 1.0 {
                0.0
            } else {
                1.0 - smoothstep(inner, 1.0, d)
            }
        }
        "linear_gradient_mask" => {
            let (x0, y0) = (num(call, "x0", 0.5), num(call, "y0", 0.0));
            let (dx, dy) = (num(call, "x1", 0.5) - x0, num(call, "y1", 1.0) - y0);
            let len2 = dx * dx + dy * dy;
            if len2 == 0.0 {
                return 0.0;
            }
            let t = ((px - x0) * dx + (py - y0) * dy) / len2;
            1.0 - t.clamp(0.0, 1.0)
        }
        other => panic!("`{other}` is not a mask tool"),
    }
}

/// Pixel extent of a crop on a `w × h` image: `(x0, y0, cw, ch)`.
pub fn crop_rect(call: &ToolCall, w: u32, h: u32) -> (u32, u32, u32, u32) {
    let floor_px = |frac: f64, n: u32| ((frac * f64::from(n)).floor() as u32).min(n - 1);
    let x0 = floor_px(num(call, "x", 0.0), w);
    let y0 = floor_px(num(call, "y", 0.0), h);
    let cw = ((num(call, "w", 1.0) * f64::from(w)).floor() as u32).clamp(1, w - x0);
    let ch = ((num(call, "h", 1.0) * f64::from(h)).floor() as u32).clamp(1, h - y0);
    (x0, y0, cw, ch)
}

/// Applies a call that has already passed validation.
pub(crate) fn apply_valid(img: &ImageBuffer, call: &ToolCall) -> ImageBuffer {
    if is_identity(call) {
        return img.clone();
    }
    match call.name.as_str() {
        "crop" => {
            let (x0, y0, cw, ch) = crop_rect(call, img.width(), img.height());
            ImageBuffer::from_fn(cw, ch, |x, y| img.pixel(x0 + x, y0 + y))
        }
        "rotate" => {
            let (w, h) = (img.width(), img.height());
            match num(call, "angle", 0.0) as u32 {
                90 => ImageBuffer::from_fn(h, w, |x, y| img.pixel(y, h - 1 - x)),
                180 => ImageBuffer::from_fn(w, h, |x, y| img.pixel(w - 1 - x, h - 1 - y)),
                270 => ImageBuffer::from_fn(h, w, |x, y| img.pixel(w - 1 - y, x)),
                _ => img.clone(),
            }
        }
        "radial_mask" | "linear_gradient_mask" => {
            let Some(ParamValue::Call(inner)) = call.params.get("adjustment") else {
                return img.clone();
            };
            let f = pixel_fn(inner);
            let (w, h) = (img.width(), img.height());
            img.map_pixels(|x, y, p| {
                let weight = mask_weight(call, w, h, x, y);
                let adjusted = f(p).map(clamp01);
                let mut out = [0.0; 3];
                for c in 0..3 {
                    out[c] = (1.0 - weight) * p[c] + weight * adjusted[c];
                }
                out
            })
        }
        _ => {
            let f = pixel_fn(call);
            img.map_pixels(|_, _, p| f(p))
        }
    }
}
