//! Presence check against a zone's bounding polygon.

use geo::{Centroid, Coord, Intersects, LineString, Point, Polygon, Validation};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FenceError {
    #[error("a fence needs at least 3 distinct vertices, got {0}")]
    TooFewVertices(usize),
    #[error("vertex {index} has invalid coordinates ({latitude}, {longitude})")]
    BadCoordinate {
        index: usize,
        latitude: f64,
        longitude: f64,
    },
    #[error("fence polygon is invalid: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub latitude: f64,
    pub longitude: f64,
}

impl LatLon {
    pub fn new(latitude: f64, longitude: f64) -> Self {
        Self {
            latitude,
            longitude,
        }
    }

    fn point(self) -> Point<f64> {
        Point::new(self.longitude, self.latitude)
    }

    fn is_valid(self) -> bool {
        self.latitude.is_finite()
            && self.longitude.is_finite()
            && (-90.0..=90.0).contains(&self.latitude)
            && (-180.0..=180.0).contains(&self.longitude)
    }
}

/// A simple polygon of (latitude, longitude) vertices. Points on the
/// boundary count as inside.
#[derive(Clone, Debug, PartialEq)]
pub struct GeoFence {
    polygon: Polygon<f64>,
    vertices: Vec<LatLon>,
}

impl GeoFence {
    pub fn new(vertices: Vec<LatLon>) -> Result<Self, FenceError> {
        for (index, v) in vertices.iter().enumerate() {
            if !v.is_valid() {
                return Err(FenceError::BadCoordinate {
                    index,
                    latitude: v.latitude,
                    longitude: v.longitude,
                });
            }
        }
        let mut ring: Vec<Coord<f64>> = vertices.iter().map(|v| v.point().0).collect();
        ring.dedup();
        if ring.len() > 1 && ring.first() == ring.last() {
            ring.pop();
        }
        if ring.len() < 3 {
            return Err(FenceError::TooFewVertices(ring.len()));
        }
        let polygon = Polygon::new(LineString::from(ring), vec![]);
        polygon
            .check_validation()
            .map_err(|e| FenceError::Invalid(e.to_string()))?;
        Ok(Self { polygon, vertices })
    }

    /// Axis-aligned box between two corners.
    pub fn rectangle(a: LatLon, b: LatLon) -> Result<Self, FenceError> {
        Self::new(vec![
            LatLon::new(a.latitude, a.longitude),
            LatLon::new(a.latitude, b.longitude),
            LatLon::new(b.latitude, b.longitude),
            LatLon::new(b.latitude, a.longitude),
        ])
    }

    pub fn vertices(&self) -> &[LatLon] {
        &self.vertices
    }

    pub fn contains(&self, at: LatLon) -> bool {
        at.is_valid() && self.polygon.intersects(&at.point())
    }

    pub fn centroid(&self) -> LatLon {
        let c = self
            .polygon
            .centroid()
            .expect("a valid polygon has a centroid");
        LatLon::new(c.y(), c.x())
    }
}
