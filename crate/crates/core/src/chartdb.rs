//! Chart marker storage and selection of the markers a camera might see.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{body_to_polar, geodetic_to_body, CameraPose, GeodeticPosition, PolarOffset};

/// Half-width (degrees) of the lat/lon window scanned before projecting.
pub const PREFILTER_DEG: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MarkerCategory {
    LateralRed,
    LateralGreen,
    SafeWater,
    Special,
    Mooring,
    Other,
}

impl MarkerCategory {
    pub const ALL: [MarkerCategory; 6] = [
        MarkerCategory::LateralRed,
        MarkerCategory::LateralGreen,
        MarkerCategory::SafeWater,
        MarkerCategory::Special,
        MarkerCategory::Mooring,
        MarkerCategory::Other,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MarkerCategory::LateralRed => "lateral-red",
            MarkerCategory::LateralGreen => "lateral-green",
            MarkerCategory::SafeWater => "safe-water",
            MarkerCategory::Special => "special",
            MarkerCategory::Mooring => "mooring",
            MarkerCategory::Other => "other",
        }
    }
}

impl fmt::Display for MarkerCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MarkerCategory {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown marker category `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartMarker {
    pub id: String,
    pub position: GeodeticPosition,
    pub category: MarkerCategory,
    pub description: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionParams {
    /// Radians, in (0, π].
    pub fov_half_angle: f64,
    pub d_max: f64,
    pub d_min: f64,
}

impl SelectionParams {
    pub fn new(fov_half_angle: f64, d_max: f64, d_min: f64) -> Result<Self> {
        let p = Self {
            fov_half_angle,
            d_max,
            d_min,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fov_half_angle > 0.0 && self.fov_half_angle <= std::f64::consts::PI) {
            return Err(Error::InvalidInput(format!(
                "fov half angle {} outside (0, π]",
                self.fov_half_angle
            )));
        }
        if !(self.d_max > 0.0 && self.d_min >= 0.0 && self.d_min <= self.d_max) {
            return Err(Error::InvalidInput(format!(
                "distance thresholds must satisfy 0 <= d_min ({}) <= d_max ({}), d_max > 0",
                self.d_min, self.d_max
            )));
        }
        Ok(())
    }

    /// Camera half FoV plus a 10° margin, d_max 1000 m, d_min 50 m.
    pub fn for_camera(horizontal_fov: f64) -> Self {
        Self {
            fov_half_angle: (horizontal_fov / 2.0 + 10f64.to_radians()).min(std::f64::consts::PI),
            d_max: 1000.0,
            d_min: 50.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuoyQuery {
    pub marker_id: String,
    pub polar: PolarOffset,
}

/// Immutable set of chart markers keyed by id.
#[derive(Debug, Clone, Default)]
pub struct MarkerStore {
    markers: BTreeMap<String, ChartMarker>,
}

impl MarkerStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_markers(markers: impl IntoIterator<Item = ChartMarker>) -> Result<Self> {
        let mut store = Self::new();
        for m in markers {
            store.insert(m)?;
        }
        Ok(store)
    }

    fn insert(&mut self, m: ChartMarker) -> Result<()> {
        if self.markers.contains_key(&m.id) {
            return Err(Error::DuplicateId(m.id));
        }
        self.markers.insert(m.id.clone(), m);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.markers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.markers.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ChartMarker> {
        self.markers.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.markers.contains_key(id)
    }

    /// Markers in id order.
    pub fn iter(&self) -> impl Iterator<Item = &ChartMarker> {
        self.markers.values()
    }

    pub fn parse_csv(text: &str, path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| Error::parse(path, 1, e.to_string()))?
            .clone();
        let expected = ["id", "lat", "lon", "category", "description"];
        if !text.trim().is_empty() && headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::parse(
                path,
                1,
                format!("header must be `{}`", expected.join(",")),
            ));
        }
        let mut store = Self::new();
        for (i, rec) in reader.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::parse(path, line, e.to_string()))?;
            let field = |k: usize| rec.get(k).unwrap_or("");
            let num = |k: usize, name: &str| -> Result<f64> {
                field(k)
                    .parse::<f64>()
                    .map_err(|_| Error::parse(path, line, format!("invalid {name} `{}`", field(k))))
            };
            let id = field(0).to_string();
            if id.is_empty() {
                return Err(Error::parse(path, line, "empty marker id"));
            }
            let position = GeodeticPosition::new(num(1, "lat")?, num(2, "lon")?)
                .map_err(|e| Error::parse(path, line, e.to_string()))?;
            let category = field(3)
                .parse()
                .map_err(|e: String| Error::parse(path, line, e))?;
            store.insert(ChartMarker {
                id,
                position,
                category,
                description: field(4).to_string(),
            })?;
        }
        Ok(store)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::InvalidInput(e.to_string());
        w.write_record(["id", "lat", "lon", "category", "description"])
            .map_err(err)?;
        for m in self.iter() {
            w.write_record([
                m.id.as_str(),
                &m.position.lat().to_string(),
                &m.position.lon().to_string(),
                m.category.as_str(),
                m.description.as_str(),
            ])
            .map_err(err)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}

pub fn load_markers(path: &Path) -> Result<MarkerStore> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    MarkerStore::parse_csv(&text, path)
}

/// Keeps markers inside the FoV wedge up to `d_max`, plus everything within
/// `d_min` regardless of bearing. Output is sorted by marker id.
pub fn select_markers(
    store: &MarkerStore,
    pose: &CameraPose,
    params: &SelectionParams,
) -> Vec<BuoyQuery> {
    let (lat0, lon0) = (pose.position.lat(), pose.position.lon());
    store
        .iter()
        .filter(|m| {
            let dlon = (m.position.lon() - lon0 + 540.0).rem_euclid(360.0) - 180.0;
            (m.position.lat() - lat0).abs() <= PREFILTER_DEG && dlon.abs() <= PREFILTER_DEG
        })
        .filter_map(|m| {
            let body = geodetic_to_body(m.position, pose).ok()?;
            let polar = body_to_polar(&body);
            let in_wedge =
                polar.bearing().abs() <= params.fov_half_angle && polar.dist() <= params.d_max;
            (in_wedge || polar.dist() <= params.d_min).then(|| BuoyQuery {
                marker_id: m.id.clone(),
                polar,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::EARTH_RADIUS_M;
    use std::f64::consts::{FRAC_PI_4, PI};

    const CSV: &str = "id,lat,lon,category,description\n\
        A1,40.5,-73.9,lateral-red,\"Red nun \"\"2\"\"\"\n\
        B2,40.501,-73.9,lateral-green,Green can 3\n\
        C3,40.5,-73.899,safe-water,RW Mo(A)\n";

    fn meters_to_dlat(m: f64) -> f64 {
        m / EARTH_RADIUS_M * 180.0 / PI
    }

    fn store_with(offsets: &[(&str, f64)]) -> (MarkerStore, CameraPose) {
        // (id, meters north of the camera), negative = astern with heading 0
        let pose = CameraPose::level(GeodeticPosition::new(40.0, -70.0).unwrap(), 0.0, 3.0).unwrap();
        let markers = offsets.iter().map(|(id, north)| ChartMarker {
            id: id.to_string(),
            position: GeodeticPosition::new(40.0 + meters_to_dlat(*north), -70.0).unwrap(),
            category: MarkerCategory::Other,
            description: String::new(),
        });
        (MarkerStore::from_markers(markers).unwrap(), pose)
    }

    #[test]
    fn loads_well_formed_file() {
        let s = MarkerStore::parse_csv(CSV, Path::new("m.csv")).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.get("A1").unwrap().description, "Red nun \"2\"");
        assert_eq!(s.get("C3").unwrap().category, MarkerCategory::SafeWater);
    }

    #[test]
    fn rejects_bad_latitude_with_line_number() {
        let text = "id,lat,lon,category,description\nA,40,-70,other,\nB,91,-70,other,\n";
        match MarkerStore::parse_csv(text, Path::new("m.csv")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_duplicates_and_unknown_categories() {
        let dup = "id,lat,lon,category,description\nA,40,-70,other,\nA,41,-70,other,\n";
        assert!(matches!(
            MarkerStore::parse_csv(dup, Path::new("m.csv")),
            Err(Error::DuplicateId(id)) if id == "A"
        ));
        let bad = "id,lat,lon,category,description\nA,40,-70,lighthouse,\n";
        assert!(MarkerStore::parse_csv(bad, Path::new("m.csv")).is_err());
        let header = "id,latitude,lon,category,description\n";
        assert!(MarkerStore::parse_csv(header, Path::new("m.csv")).is_err());
    }

    #[test]
    fn empty_file_is_empty_store() {
        assert!(MarkerStore::parse_csv("", Path::new("m.csv")).unwrap().is_empty());
        let header_only = "id,lat,lon,category,description\n";
        assert!(MarkerStore::parse_csv(header_only, Path::new("m.csv"))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn csv_round_trip() {
        let s = MarkerStore::parse_csv(CSV, Path::new("m.csv")).unwrap();
        let again = MarkerStore::parse_csv(&s.to_csv().unwrap(), Path::new("m.csv")).unwrap();
        assert_eq!(
            s.iter().cloned().collect::<Vec<_>>(),
            again.iter().cloned().collect::<Vec<_>>()
        );
    }

    #[test]
    fn selection_examples() {
        let params = SelectionParams::new(FRAC_PI_4, 1000.0, 50.0).unwrap();
        let (store, pose) = store_with(&[("ahead", 500.0), ("astern_far", -200.0), ("astern_near", -30.0)]);
        let q = select_markers(&store, &pose, &params);
        let ids: Vec<_> = q.iter().map(|q| q.marker_id.as_str()).collect();
        assert_eq!(ids, ["ahead", "astern_near"]);
        assert!((q[0].polar.dist() - 500.0).abs() < 0.5);
        assert!(q[0].polar.bearing().abs() < 1e-9);
    }

    #[test]
    fn prefilter_skips_distant_tiles() {
        let (store, pose) = store_with(&[("far", 0.06 / 180.0 * PI * EARTH_RADIUS_M)]);
        let params = SelectionParams::new(PI, 1e6, 1e6).unwrap();
        assert!(select_markers(&store, &pose, &params).is_empty());
    }

    #[test]
    fn params_validation() {
        assert!(SelectionParams::new(0.0, 10.0, 1.0).is_err());
        assert!(SelectionParams::new(1.0, 10.0, 20.0).is_err());
        assert!(SelectionParams::new(4.0, 10.0, 1.0).is_err());
        let d = SelectionParams::for_camera(60f64.to_radians());
        assert!((d.fov_half_angle - 40f64.to_radians()).abs() < 1e-12);
    }
}
