//! Deterministic JSON rendering.
//!
//! Reals are written either with exactly six decimals or in the shortest form
//! that parses back to the same `f64`. Key order follows struct field order.

use std::io::{self, Write};

use serde::Serialize;
use serde_json::ser::{CompactFormatter, Formatter, PrettyFormatter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RealFormat {
    #[default]
    Fixed6,
    Shortest,
}

impl RealFormat {
    pub fn render(self, v: f64) -> String {
        match self {
            RealFormat::Fixed6 => format!("{v:.6}"),
            RealFormat::Shortest => format!("{v}"),
        }
    }
}

struct RealFormatter<F> {
    inner: F,
    reals: RealFormat,
}

impl<F: Formatter> Formatter for RealFormatter<F> {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        if value.is_finite() {
            writer.write_all(self.reals.render(value).as_bytes())
        } else {
            writer.write_all(b"null")
        }
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }

    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_array(w)
    }

    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_array(w)
    }

    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.inner.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_array_value(w)
    }

    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_object(w)
    }

    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_object(w)
    }

    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.inner.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_object_value(w)
    }
}

/// Indented JSON document.
pub fn write_pretty<W: Write, T: Serialize + ?Sized>(
    out: W,
    value: &T,
    reals: RealFormat,
) -> serde_json::Result<()> {
    let formatter = RealFormatter {
        inner: PrettyFormatter::new(),
        reals,
    };
    value.serialize(&mut serde_json::Serializer::with_formatter(out, formatter))
}

/// One compact JSON value followed by a newline.
pub fn write_line<W: Write, T: Serialize + ?Sized>(
    mut out: W,
    value: &T,
    reals: RealFormat,
) -> serde_json::Result<()> {
    let formatter = RealFormatter {
        inner: CompactFormatter,
        reals,
    };
    value.serialize(&mut serde_json::Serializer::with_formatter(
        &mut out, formatter,
    ))?;
    out.write_all(b"\n").map_err(serde_json::Error::io)
}

pub fn to_pretty_string<T: Serialize + ?Sized>(value: &T, reals: RealFormat) -> String {
    let mut buf = Vec::new();
    write_pretty(&mut buf, value, reals).expect("serializing to memory");
    String::from_utf8(buf).expect("serde_json emits UTF-8")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Sample {
        b: f64,
        a: Vec<f64>,
        n: usize,
    }

    #[test]
    fn fixed_and_shortest() {
        let s = Sample {
            b: 28.0 / 33.0,
            a: vec![1.0, 0.5],
            n: 3,
        };
        let mut buf = Vec::new();
        write_line(&mut buf, &s, RealFormat::Fixed6).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "{\"b\":0.848485,\"a\":[1.000000,0.500000],\"n\":3}\n"
        );
        let mut buf = Vec::new();
        write_line(&mut buf, &s, RealFormat::Shortest).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "{\"b\":0.8484848484848485,\"a\":[1,0.5],\"n\":3}\n");
        let back: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(back["b"].as_f64().unwrap(), 28.0 / 33.0);
    }

    #[test]
    fn pretty_is_valid_json() {
        let text = to_pretty_string(
            &Sample {
                b: 0.1,
                a: vec![],
                n: 0,
            },
            RealFormat::Fixed6,
        );
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["b"].as_f64().unwrap(), 0.1);
        assert!(text.contains("\n  \"a\": []"));
    }
}
