use serde::{Deserialize, Serialize};

use super::vec3::Point3;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Where a point of a completion output came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Input,
    Generated,
    Upsampled,
}

/// Non-empty ordered set of finite 3D points, optionally tagged per point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointSet {
    points: Vec<Point3>,
    provenance: Option<Vec<Provenance>>,
}

impl PointSet {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Contract("point set must not be empty".into()));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::Numeric(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self {
            points,
            provenance: None,
        })
    }

    pub fn with_provenance(points: Vec<Point3>, tags: Vec<Provenance>) -> Result<Self> {
        if tags.len() != points.len() {
            return Err(Error::Contract(format!(
                "{} provenance tags for {} points",
                tags.len(),
                points.len()
            )));
        }
        let mut s = Self::new(points)?;
        s.provenance = Some(tags);
        Ok(s)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Self::new(t.to_points()?)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_points(&self.points)
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }

    pub fn provenance(&self) -> Option<&[Provenance]> {
        self.provenance.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn count(&self, tag: Provenance) -> usize {
        self.provenance
            .as_ref()
            .map(|t| t.iter().filter(|&&x| x == tag).count())
            .unwrap_or(0)
    }
}

impl AsRef<[Point3]> for PointSet {
    fn as_ref(&self) -> &[Point3] {
        &self.points
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(PointSet::new(vec![]).is_err());
        assert!(PointSet::new(vec![[0.0, f64::NAN, 0.0]]).is_err());
        assert!(PointSet::with_provenance(vec![[0.0; 3]], vec![]).is_err());
    }
}
