//! Frame-level event lists and their CSV form.
//!
//! CSV schema (header required): `frame,class,azimuth_deg,elevation_deg`,
//! one row per active (frame, class) at the 10 Hz label rate.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{cart_to_sph, normalize, sph_to_cart, Vec3};

/// Label frames per second.
pub const LABEL_RATE_HZ: f64 = 10.0;
pub const LABEL_HOP_S: f64 = 1.0 / LABEL_RATE_HZ;

const CSV_HEADER: [&str; 4] = ["frame", "class", "azimuth_deg", "elevation_deg"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub frame: usize,
    pub class_id: usize,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
}

impl EventRecord {
    pub fn new(frame: usize, class_id: usize, azimuth_deg: f64, elevation_deg: f64) -> Self {
        Self {
            frame,
            class_id,
            azimuth_deg,
            elevation_deg,
        }
    }

    /// Builds a record from any nonzero direction vector.
    pub fn from_doa(frame: usize, class_id: usize, doa: Vec3) -> Option<Self> {
        normalize(doa)?;
        let (az, el) = cart_to_sph(doa);
        Some(Self::new(frame, class_id, az, el))
    }

    /// Unit direction vector.
    pub fn doa(&self) -> Vec3 {
        sph_to_cart(self.azimuth_deg, self.elevation_deg)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventList {
    records: Vec<EventRecord>,
}

impl EventList {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: EventRecord) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[EventRecord] {
        &self.records
    }

    pub fn iter(&self) -> std::slice::Iter<'_, EventRecord> {
        self.records.iter()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Sorted by (frame, class); stable so same-cell duplicates keep order.
    pub fn sorted(&self) -> Self {
        let mut records = self.records.clone();
        records.sort_by_key(|r| (r.frame, r.class_id));
        Self { records }
    }

    /// Keeps only records with `frame < frames`.
    pub fn truncated(&self, frames: usize) -> Self {
        self.records
            .iter()
            .filter(|r| r.frame < frames)
            .copied()
            .collect()
    }

    pub fn count_class(&self, class_id: usize) -> usize {
        self.records
            .iter()
            .filter(|r| r.class_id == class_id)
            .count()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(CSV_HEADER).map_err(csv_io)?;
        for r in &self.records {
            // Debug formatting of f64 is shortest-round-trip and keeps a ".0".
            w.write_record([
                r.frame.to_string(),
                r.class_id.to_string(),
                format!("{:?}", r.azimuth_deg),
                format!("{:?}", r.elevation_deg),
            ])
            .map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }

    /// `source` is only used to label parse errors.
    pub fn read_csv<R: Read>(reader: R, source: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let parse_err = |line: usize, message: String| Error::Parse {
            path: source.to_path_buf(),
            line,
            message,
        };
        let mut records = Vec::new();
        let mut saw_header = false;
        for (i, row) in rdr.records().enumerate() {
            let row = row.map_err(|e| {
                let line = e.position().map(|p| p.line() as usize).unwrap_or(i + 1);
                parse_err(line, e.to_string())
            })?;
            let line = row.position().map(|p| p.line() as usize).unwrap_or(i + 1);
            if !saw_header {
                let header: Vec<&str> = row.iter().collect();
                if header != CSV_HEADER {
                    return Err(parse_err(
                        line,
                        format!(
                            "expected header {:?}, found {:?}",
                            CSV_HEADER.join(","),
                            header.join(",")
                        ),
                    ));
                }
                saw_header = true;
                continue;
            }
            if row.len() != 4 {
                return Err(parse_err(
                    line,
                    format!("expected 4 fields, found {}", row.len()),
                ));
            }
            let frame = row[0]
                .parse::<usize>()
                .map_err(|e| parse_err(line, format!("frame {:?}: {e}", &row[0])))?;
            let class_id = row[1]
                .parse::<usize>()
                .map_err(|e| parse_err(line, format!("class {:?}: {e}", &row[1])))?;
            let az = row[2]
                .parse::<f64>()
                .map_err(|e| parse_err(line, format!("azimuth {:?}: {e}", &row[2])))?;
            let el = row[3]
                .parse::<f64>()
                .map_err(|e| parse_err(line, format!("elevation {:?}: {e}", &row[3])))?;
            if !az.is_finite() || !(-90.0..=90.0).contains(&el) {
                return Err(parse_err(
                    line,
                    format!("angles out of range: az {az}, el {el}"),
                ));
            }
            records.push(EventRecord::new(frame, class_id, az, el));
        }
        Ok(Self { records })
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(File::create(path)?))
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::read_csv(std::io::BufReader::new(File::open(path)?), path)
    }
}

impl FromIterator<EventRecord> for EventList {
    fn from_iter<I: IntoIterator<Item = EventRecord>>(iter: I) -> Self {
        Self {
            records: iter.into_iter().collect(),
        }
    }
}

impl<'a> IntoIterator for &'a EventList {
    type Item = &'a EventRecord;
    type IntoIter = std::slice::Iter<'a, EventRecord>;

    fn into_iter(self) -> Self::IntoIter {
        self.records.iter()
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<EventList> {
        EventList::read_csv(text.as_bytes(), Path::new("mem.csv"))
    }

    #[test]
    fn axis_row_decodes() {
        let list = parse("frame,class,azimuth_deg,elevation_deg\n12,3,-90.0,0.0\n").unwrap();
        assert_eq!(list.len(), 1);
        let r = list.records()[0];
        assert_eq!((r.frame, r.class_id), (12, 3));
        let d = r.doa();
        assert!(d[0].abs() < 1e-12 && (d[1] + 1.0).abs() < 1e-12 && d[2].abs() < 1e-12);
    }

    #[test]
    fn empty_file_with_header_is_empty_list() {
        assert!(parse("frame,class,azimuth_deg,elevation_deg\n")
            .unwrap()
            .is_empty());
        assert!(parse("").unwrap().is_empty());
    }

    #[test]
    fn malformed_row_reports_line() {
        let err = parse("frame,class,azimuth_deg,elevation_deg\n1,0,10.0,0.0\n2,x,1.0,0.0\n")
            .unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse("frame,cls,az,el\n"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn write_read_is_exact() {
        let list: EventList = [
            EventRecord::new(0, 1, -179.99999999999997, 12.345678901234567),
            EventRecord::new(5, 0, 0.1 + 0.2, -90.0),
        ]
        .into_iter()
        .collect();
        let mut buf = Vec::new();
        list.write_csv(&mut buf).unwrap();
        assert_eq!(parse(std::str::from_utf8(&buf).unwrap()).unwrap(), list);
    }
}
