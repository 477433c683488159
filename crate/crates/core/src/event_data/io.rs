//! On-disk formats: CSV and `EVT0` event streams, `RAS0` rasters.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Event, EventList, Raster, Sample, SensorSize};
use crate::error::{Error, Result};

const EVENT_MAGIC: &[u8; 4] = b"EVT0";
const RASTER_MAGIC: &[u8; 4] = b"RAS0";
const CSV_HEADER: &str = "t,x,y,p";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventFormat {
    Csv,
    Raw,
}

/// Loads an event file. CSV carries no sensor geometry, so `sensor` is
/// required for it; raw files declare their own and `sensor`, if given,
/// must agree.
pub fn load_events(path: impl AsRef<Path>, format: EventFormat, sensor: Option<SensorSize>) -> Result<EventList> {
    let path = path.as_ref();
    match format {
        EventFormat::Csv => {
            let sensor = sensor.ok_or_else(|| Error::Config("CSV event files need an explicit sensor size".into()))?;
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_csv_events(&text, sensor)
        }
        EventFormat::Raw => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            let events = parse_raw_events(&bytes)?;
            if let Some(s) = sensor {
                if s != events.sensor() {
                    return Err(Error::Validation(format!(
                        "file declares {}x{} sensor, expected {}x{}",
                        events.sensor().width,
                        events.sensor().height,
                        s.width,
                        s.height
                    )));
                }
            }
            Ok(events)
        }
    }
}

pub fn parse_csv_events(text: &str, sensor: SensorSize) -> Result<EventList> {
    let mut lines = text.split('\n').enumerate();
    match lines.next() {
        Some((_, header)) if header.trim_end_matches('\r').trim() == CSV_HEADER => {}
        Some((_, header)) => {
            return Err(Error::parse("line 1", format!("expected header `{CSV_HEADER}`, found `{header}`")))
        }
        None => return Err(Error::parse("line 1", "missing header")),
    }

    let mut events = Vec::new();
    for (i, line) in lines {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let location = format!("line {}", i + 1);
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::parse(location, format!("expected 4 fields, found {}", fields.len())));
        }
        let num = |s: &str, name: &str| -> Result<u64> {
            s.parse::<u64>().map_err(|e| Error::parse(location.clone(), format!("field `{name}`: {e}")))
        };
        let t = num(fields[0], "t")?;
        let x = num(fields[1], "x")?;
        let y = num(fields[2], "y")?;
        let p = num(fields[3], "p")?;
        if x >= sensor.width as u64 || y >= sensor.height as u64 || p > 1 {
            return Err(Error::Validation(format!(
                "{location}: event ({t}, {x}, {y}, {p}) outside {}x{} sensor or bad polarity",
                sensor.width, sensor.height
            )));
        }
        events.push(Event { t, x: x as u32, y: y as u32, p: p as u8 });
    }
    EventList::new(events, sensor)
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::parse(format!("offset {offset}"), "unexpected end of file"))
}

pub fn parse_raw_events(bytes: &[u8]) -> Result<EventList> {
    if bytes.get(..4) != Some(EVENT_MAGIC.as_slice()) {
        return Err(Error::parse("offset 0", "missing EVT0 magic"));
    }
    let width = read_u32(bytes, 4)?;
    let height = read_u32(bytes, 8)?;
    let count = read_u32(bytes, 12)? as usize;
    let expected = 16 + count * 16;
    if bytes.len() != expected {
        return Err(Error::parse(
            format!("offset {}", bytes.len().min(expected)),
            format!("header declares {count} records ({expected} bytes), file has {} bytes", bytes.len()),
        ));
    }
    let sensor = SensorSize { width, height };
    let mut events = Vec::with_capacity(count);
    for i in 0..count {
        let base = 16 + i * 16;
        let t = read_u32(bytes, base)?;
        let x = read_u32(bytes, base + 4)?;
        let y = read_u32(bytes, base + 8)?;
        let p = read_u32(bytes, base + 12)?;
        if x >= width || y >= height || p > 1 {
            return Err(Error::Validation(format!(
                "record at offset {base}: event ({t}, {x}, {y}, {p}) outside {width}x{height} sensor or bad polarity"
            )));
        }
        events.push(Event { t: t as u64, x, y, p: p as u8 });
    }
    EventList::new(events, sensor)
}

pub fn write_csv_events(path: impl AsRef<Path>, events: &EventList) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for e in events.events() {
        out.push_str(&format!("{},{},{},{}\n", e.t, e.x, e.y, e.p));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_raw_events(path: impl AsRef<Path>, events: &EventList) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(16 + events.len() * 16);
    out.extend_from_slice(EVENT_MAGIC);
    out.extend_from_slice(&events.sensor().width.to_le_bytes());
    out.extend_from_slice(&events.sensor().height.to_le_bytes());
    out.extend_from_slice(&(events.len() as u32).to_le_bytes());
    for e in events.events() {
        let t = u32::try_from(e.t).map_err(|_| Error::Validation(format!("timestamp {} exceeds u32", e.t)))?;
        for v in [t, e.x, e.y, e.p as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn raster_to_bytes(raster: &Raster) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + raster.data().len());
    out.extend_from_slice(RASTER_MAGIC);
    for d in raster.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(raster.data());
    out
}

pub fn raster_from_bytes(bytes: &[u8]) -> Result<Raster> {
    if bytes.get(..4) != Some(RASTER_MAGIC.as_slice()) {
        return Err(Error::parse("offset 0", "missing RAS0 magic"));
    }
    let mut shape = [0usize; 4];
    for (i, d) in shape.iter_mut().enumerate() {
        *d = read_u32(bytes, 4 + 4 * i)? as usize;
    }
    let body = &bytes[20.min(bytes.len())..];
    let n: usize = shape.iter().product();
    if body.len() != n {
        return Err(Error::parse("offset 20", format!("expected {n} voxel bytes, found {}", body.len())));
    }
    Raster::from_vec(shape, body.to_vec())
}

pub fn write_raster(path: impl AsRef<Path>, raster: &Raster) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, raster_to_bytes(raster)).map_err(|e| Error::io(path, e))
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    raster_from_bytes(&bytes)
}

/// Index file of a dataset directory.
pub const DATASET_INDEX: &str = "index.json";

#[derive(Debug, Serialize, Deserialize)]
struct DatasetIndex {
    n_classes: usize,
    samples: Vec<IndexEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    file: String,
    label: usize,
}

/// Writes one `RAS0` file per sample plus an `index.json` listing files and
/// labels.
pub fn save_dataset(dir: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut samples = Vec::with_capacity(data.samples.len());
    for (i, s) in data.samples.iter().enumerate() {
        let file = format!("{i:06}.ras");
        write_raster(dir.join(&file), &s.raster)?;
        samples.push(IndexEntry { file, label: s.label });
    }
    let index = DatasetIndex { n_classes: data.n_classes, samples };
    let path = dir.join(DATASET_INDEX);
    fs::write(&path, serde_json::to_string_pretty(&index)? + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let path = dir.join(DATASET_INDEX);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: DatasetIndex = serde_json::from_str(&text)?;
    let samples = index
        .samples
        .into_iter()
        .map(|e| {
            if e.label >= index.n_classes {
                return Err(Error::parse(
                    path.display().to_string(),
                    format!("label {} of {} exceeds n_classes {}", e.label, e.file, index.n_classes),
                ));
            }
            Ok(Sample { raster: read_raster(dir.join(&e.file))?, label: e.label })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { n_classes: index.n_classes, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    const S8: SensorSize = SensorSize { width: 8, height: 8 };

    #[test]
    fn csv_single_record() {
        let list = parse_csv_events("t,x,y,p\n10,3,4,1", S8).unwrap();
        assert_eq!(list.events(), &[Event { t: 10, x: 3, y: 4, p: 1 }]);
    }

    #[test]
    fn csv_header_only() {
        assert!(parse_csv_events("t,x,y,p\n", S8).unwrap().is_empty());
    }

    #[test]
    fn csv_sorts() {
        let list = parse_csv_events("t,x,y,p\n20,0,0,0\n10,1,1,1\n", S8).unwrap();
        let ts: Vec<u64> = list.events().iter().map(|e| e.t).collect();
        assert_eq!(ts, vec![10, 20]);
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let err = parse_csv_events("t,x,y,p\n1,2,3,0\n1,2,x,0\n", S8).unwrap_err();
        match err {
            Error::Parse { location, .. } => assert_eq!(location, "line 3"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_csv_events("t,x,y,p\n1,8,3,0\n", S8), Err(Error::Validation(_))));
        assert!(parse_csv_events("a,b\n", S8).is_err());
    }

    #[test]
    fn raw_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let list = parse_csv_events("t,x,y,p\n20,0,0,0\n10,7,1,1\n", S8).unwrap();
        let path = dir.path().join("e.evt");
        write_raw_events(&path, &list).unwrap();
        assert_eq!(load_events(&path, EventFormat::Raw, Some(S8)).unwrap(), list);

        let bytes = fs::read(&path).unwrap();
        let err = parse_raw_events(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
        assert!(load_events(&path, EventFormat::Raw, Some(SensorSize { width: 4, height: 4 })).is_err());
    }

    #[test]
    fn raster_file_layout() {
        let mut r = Raster::zeros([2, 1, 1, 2]);
        r.set(1, 0, 0, 1, 1);
        let bytes = raster_to_bytes(&r);
        assert_eq!(&bytes[..4], b"RAS0");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[20..], &[0, 0, 0, 1]);
        assert_eq!(raster_from_bytes(&bytes).unwrap(), r);
        assert!(raster_from_bytes(&bytes[..22]).is_err());
    }
}
