use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::max_affine::Domain;

/// Observations `(X_i, y_i)` with every `X_i` in `[a, b]^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    points: Vec<Vec<f64>>,
    responses: Vec<f64>,
    domain: Domain,
}

impl Dataset {
    pub fn new(points: Vec<Vec<f64>>, responses: Vec<f64>, domain: Domain) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("dataset needs at least one observation"));
        }
        if points.len() != responses.len() {
            return Err(Error::Dimension { expected: points.len(), got: responses.len() });
        }
        for (i, (x, y)) in points.iter().zip(&responses).enumerate() {
            if x.len() != domain.d {
                return Err(Error::Dimension { expected: domain.d, got: x.len() });
            }
            if !y.is_finite() || x.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("observation {i} has non-finite values")));
            }
            if !domain.contains(x, 0.0) {
                return Err(Error::invalid(format!("point {i} lies outside [{}, {}]^{}", domain.a, domain.b, domain.d)));
            }
        }
        Ok(Dataset { points, responses, domain })
    }

    /// One-dimensional convenience constructor.
    pub fn from_1d(xs: &[f64], ys: &[f64], a: f64, b: f64) -> Result<Self> {
        Dataset::new(xs.iter().map(|&x| vec![x]).collect(), ys.to_vec(), Domain::new(a, b, 1)?)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.domain.d
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn responses(&self) -> &[f64] {
        &self.responses
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn mean_response(&self) -> f64 {
        self.responses.iter().sum::<f64>() / self.len() as f64
    }

    /// Biased (divide-by-n) variance of the responses.
    pub fn response_variance(&self) -> f64 {
        let mean = self.mean_response();
        self.responses.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / self.len() as f64
    }

    /// Sub-dataset made of the given observation indices, same domain.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Dataset::new(
            indices.iter().map(|&i| self.points[i].clone()).collect(),
            indices.iter().map(|&i| self.responses[i]).collect(),
            self.domain,
        )
    }

    /// CSV with header `x1,...,xd,y`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (1..=self.dim()).map(|k| format!("x{k}")).collect();
        header.push("y".into());
        w.write_record(&header)?;
        for (x, y) in self.points.iter().zip(&self.responses) {
            let record: Vec<String> = x.iter().chain(std::iter::once(y)).map(|v| v.to_string()).collect();
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a CSV written by [`Dataset::write_csv`]; the domain is supplied separately.
    pub fn read_csv<R: Read>(input: R, a: f64, b: f64) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        let d = header.len().checked_sub(1).filter(|&d| d >= 1).ok_or_else(|| {
            Error::invalid("dataset CSV needs at least one x column and a y column")
        })?;
        let expected: Vec<String> = (1..=d).map(|k| format!("x{k}")).chain(["y".to_string()]).collect();
        if header.iter().map(str::trim).ne(expected.iter().map(String::as_str)) {
            return Err(Error::invalid(format!("dataset CSV header must be {}", expected.join(","))));
        }
        let mut points = Vec::new();
        let mut responses = Vec::new();
        for record in r.records() {
            let record = record?;
            let values = record
                .iter()
                .map(|s| s.trim().parse::<f64>().map_err(|e| Error::invalid(format!("bad number {s:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            responses.push(values[d]);
            points.push(values[..d].to_vec());
        }
        Dataset::new(points, responses, Domain::new(a, b, d)?)
    }

    pub fn load_csv(path: impl AsRef<Path>, a: f64, b: f64) -> Result<Self> {
        Dataset::read_csv(std::fs::File::open(path)?, a, b)
    }
}
