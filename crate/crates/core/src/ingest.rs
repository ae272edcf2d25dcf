//! CSV ingestion of raw GPS fixes and (de)serialization of standardized
//! traces.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{GridMap, RawFix, Record, Trace, SECONDS_PER_DAY};

/// Raw dataset flavor. It decides how stations are extracted later on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    /// Every row carries a passenger-occupancy flag.
    TaxiOccupancy,
    /// Only position and time; stations come from parking dwells.
    PrivateCar,
}

impl FromStr for DatasetFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "taxi-occupancy" | "taxi" => Ok(DatasetFormat::TaxiOccupancy),
            "private-car" | "car" => Ok(DatasetFormat::PrivateCar),
            other => Err(Error::config(format!("unknown dataset format '{other}'"))),
        }
    }
}

impl DatasetFormat {
    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetFormat::TaxiOccupancy => "taxi-occupancy",
            DatasetFormat::PrivateCar => "private-car",
        }
    }
}

#[derive(Debug, Clone)]
pub struct DatasetDescriptor {
    pub format: DatasetFormat,
    pub path: PathBuf,
    pub map: GridMap,
    /// Fixed offset added to epoch timestamps to get local time.
    pub utc_offset_s: i64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Ingested {
    pub traces: Vec<Trace>,
    pub rows: usize,
    /// Fixes with invalid coordinates or outside the map.
    pub dropped: usize,
    /// Repeated `(vehicle, timestamp)` rows; the first one wins.
    pub duplicates: usize,
}

impl Ingested {
    pub fn n_records(&self) -> usize {
        self.traces.iter().map(Trace::len).sum()
    }
}

fn parse_occupancy(raw: &str, row: usize) -> Result<Option<bool>> {
    match raw.trim() {
        "" => Ok(None),
        "1" | "true" => Ok(Some(true)),
        "0" | "false" => Ok(Some(false)),
        other => Err(Error::MalformedRow {
            row,
            reason: format!("bad occupancy '{other}'"),
        }),
    }
}

fn field<'a>(rec: &'a csv::StringRecord, i: usize, row: usize, name: &str) -> Result<&'a str> {
    rec.get(i).ok_or_else(|| Error::MalformedRow {
        row,
        reason: format!("missing {name}"),
    })
}

fn number<T: FromStr>(raw: &str, row: usize, name: &str) -> Result<T> {
    raw.trim().parse().map_err(|_| Error::MalformedRow {
        row,
        reason: format!("bad {name} '{raw}'"),
    })
}

/// Groups fixes per vehicle, sorts them by time and keeps the first of any
/// repeated timestamp.
fn assemble(per_vehicle: BTreeMap<String, Vec<Record>>) -> (Vec<Trace>, usize) {
    let mut traces: Vec<Trace> = per_vehicle
        .into_iter()
        .map(|(id, records)| Trace::new(id, records))
        .collect();
    let duplicates: usize = traces
        .par_iter_mut()
        .map(|t| {
            t.records.sort_by_key(|r| r.time);
            let before = t.records.len();
            t.records.dedup_by_key(|r| r.time);
            before - t.records.len()
        })
        .sum();
    (traces, duplicates)
}

/// Reads raw fixes (`vehicle_id,timestamp,lat,lon[,occupancy]`).
pub fn parse_dataset(desc: &DatasetDescriptor) -> Result<Ingested> {
    let file = File::open(&desc.path)?;
    parse_raw_reader(file, desc)
}

pub fn parse_raw_reader<R: Read>(reader: R, desc: &DatasetDescriptor) -> Result<Ingested> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let names: Vec<&str> = headers.iter().collect();
    if names.len() < 4 || names[..4] != ["vehicle_id", "timestamp", "lat", "lon"] {
        return Err(Error::MalformedRow {
            row: 1,
            reason: "expected header vehicle_id,timestamp,lat,lon[,occupancy]".into(),
        });
    }
    let has_occupancy = names.get(4) == Some(&"occupancy");

    let mut per_vehicle: BTreeMap<String, Vec<Record>> = BTreeMap::new();
    let mut rows = 0;
    let mut dropped = 0;
    for (i, rec) in rdr.records().enumerate() {
        // header is line 1
        let row = i + 2;
        let rec = rec.map_err(|e| Error::MalformedRow {
            row,
            reason: e.to_string(),
        })?;
        rows += 1;
        let occupancy = if has_occupancy {
            parse_occupancy(rec.get(4).unwrap_or(""), row)?
        } else {
            None
        };
        if desc.format == DatasetFormat::TaxiOccupancy && occupancy.is_none() {
            return Err(Error::MissingOccupancy { row });
        }
        let fix = RawFix {
            vehicle_id: field(&rec, 0, row, "vehicle_id")?.to_string(),
            timestamp: number(field(&rec, 1, row, "timestamp")?, row, "timestamp")?,
            lat: number(field(&rec, 2, row, "lat")?, row, "lat")?,
            lon: number(field(&rec, 3, row, "lon")?, row, "lon")?,
            occupancy,
        };
        if !fix.has_valid_coordinates() {
            dropped += 1;
            continue;
        }
        let Ok(region) = desc.map.fix_to_region(fix.lat, fix.lon) else {
            dropped += 1;
            continue;
        };
        per_vehicle.entry(fix.vehicle_id).or_default().push(Record {
            region,
            time: fix.timestamp + desc.utc_offset_s,
            occupied: fix.occupancy,
        });
    }
    let (traces, duplicates) = assemble(per_vehicle);
    Ok(Ingested {
        traces,
        rows,
        dropped,
        duplicates,
    })
}

/// Writes standardized traces as `vehicle_id,day,second_of_day,region`,
/// adding an `occupancy` column when any record carries one.
pub fn write_traces<W: Write>(writer: W, traces: &[Trace]) -> Result<()> {
    let with_occ = traces
        .iter()
        .any(|t| t.records.iter().any(|r| r.occupied.is_some()));
    let mut w = csv::Writer::from_writer(writer);
    if with_occ {
        w.write_record(["vehicle_id", "day", "second_of_day", "region", "occupancy"])?;
    } else {
        w.write_record(["vehicle_id", "day", "second_of_day", "region"])?;
    }
    for t in traces {
        for r in &t.records {
            let day = r.day().to_string();
            let sod = r.second_of_day().to_string();
            let region = r.region.to_string();
            if with_occ {
                let occ = match r.occupied {
                    Some(true) => "1",
                    Some(false) => "0",
                    None => "",
                };
                w.write_record([t.vehicle_id.as_str(), &day, &sod, &region, occ])?;
            } else {
                w.write_record([t.vehicle_id.as_str(), &day, &sod, &region])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_traces_file(path: &Path, traces: &[Trace]) -> Result<()> {
    write_traces(std::io::BufWriter::new(File::create(path)?), traces)
}

/// Reads traces written by [`write_traces`].
pub fn read_traces<R: Read>(reader: R, map: &GridMap) -> Result<Vec<Trace>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let names: Vec<&str> = headers.iter().collect();
    if names.len() < 4 || names[..4] != ["vehicle_id", "day", "second_of_day", "region"] {
        return Err(Error::MalformedRow {
            row: 1,
            reason: "expected header vehicle_id,day,second_of_day,region[,occupancy]".into(),
        });
    }
    let mut per_vehicle: BTreeMap<String, Vec<Record>> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::MalformedRow {
            row,
            reason: e.to_string(),
        })?;
        let day: i64 = number(field(&rec, 1, row, "day")?, row, "day")?;
        let sod: u32 = number(field(&rec, 2, row, "second_of_day")?, row, "second_of_day")?;
        if sod >= SECONDS_PER_DAY {
            return Err(Error::MalformedRow {
                row,
                reason: format!("second_of_day {sod} out of range"),
            });
        }
        let region = number(field(&rec, 3, row, "region")?, row, "region")?;
        if !map.contains(region) {
            return Err(Error::MalformedRow {
                row,
                reason: format!("region {region} not on the map"),
            });
        }
        let occupied = parse_occupancy(rec.get(4).unwrap_or(""), row)?;
        per_vehicle
            .entry(field(&rec, 0, row, "vehicle_id")?.to_string())
            .or_default()
            .push(Record {
                occupied,
                ..Record::at(region, day, sod)
            });
    }
    Ok(assemble(per_vehicle).0)
}

/// Loads either a raw fix file or a standardized trace file, telling them
/// apart by the header.
pub fn load_any(desc: &DatasetDescriptor) -> Result<Ingested> {
    let mut head = String::new();
    {
        let mut f = File::open(&desc.path)?;
        let mut buf = [0u8; 256];
        let n = f.read(&mut buf)?;
        head.push_str(&String::from_utf8_lossy(&buf[..n]));
    }
    if head.starts_with("vehicle_id,day,") {
        let traces = read_traces(File::open(&desc.path)?, &desc.map)?;
        if desc.format == DatasetFormat::TaxiOccupancy {
            for t in &traces {
                if let Some(i) = t.records.iter().position(|r| r.occupied.is_none()) {
                    return Err(Error::MissingSignal {
                        vehicle: t.vehicle_id.clone(),
                        index: i,
                    });
                }
            }
        }
        let rows = traces.iter().map(Trace::len).sum();
        Ok(Ingested {
            traces,
            rows,
            ..Ingested::default()
        })
    } else {
        parse_dataset(desc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn desc(format: DatasetFormat) -> DatasetDescriptor {
        DatasetDescriptor {
            format,
            path: PathBuf::new(),
            map: GridMap::default(),
            utc_offset_s: 0,
        }
    }

    fn parse_str(text: &str, format: DatasetFormat) -> Result<Ingested> {
        parse_raw_reader(text.as_bytes(), &desc(format))
    }

    #[test]
    fn empty_file() {
        let out = parse_str("vehicle_id,timestamp,lat,lon\n", DatasetFormat::PrivateCar).unwrap();
        assert!(out.traces.is_empty());
    }

    #[test]
    fn sorts_by_time() {
        let text = "vehicle_id,timestamp,lat,lon\n\
                    a,300,31.201,121.401\n\
                    a,100,31.201,121.401\n\
                    a,200,31.201,121.401\n";
        let out = parse_str(text, DatasetFormat::PrivateCar).unwrap();
        assert_eq!(out.traces.len(), 1);
        let times: Vec<i64> = out.traces[0].records.iter().map(|r| r.time).collect();
        assert_eq!(times, vec![100, 200, 300]);
    }

    #[test]
    fn bad_latitude_dropped() {
        let text = "vehicle_id,timestamp,lat,lon\n\
                    a,100,95.0,121.401\n\
                    a,200,31.201,121.401\n";
        let out = parse_str(text, DatasetFormat::PrivateCar).unwrap();
        assert_eq!(out.dropped, 1);
        assert_eq!(out.traces[0].len(), 1);
    }

    #[test]
    fn outside_map_dropped() {
        let text = "vehicle_id,timestamp,lat,lon\na,100,30.0,121.401\n";
        let out = parse_str(text, DatasetFormat::PrivateCar).unwrap();
        assert_eq!(out.dropped, 1);
        assert!(out.traces.is_empty());
    }

    #[test]
    fn duplicates_keep_first() {
        let map = GridMap::default();
        let (lat0, lon0) = map.center_latlon(0);
        let (lat1, lon1) = map.center_latlon(1);
        let text = format!(
            "vehicle_id,timestamp,lat,lon\na,100,{lat0},{lon0}\na,100,{lat1},{lon1}\n"
        );
        let out = parse_str(&text, DatasetFormat::PrivateCar).unwrap();
        assert_eq!(out.duplicates, 1);
        assert_eq!(out.traces[0].records[0].region, 0);
    }

    #[test]
    fn malformed_row_reports_line() {
        let text = "vehicle_id,timestamp,lat,lon\na,100,31.201,121.401\na,xx,31.2,121.4\n";
        match parse_str(text, DatasetFormat::PrivateCar) {
            Err(Error::MalformedRow { row, .. }) => assert_eq!(row, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn taxi_needs_occupancy() {
        let text = "vehicle_id,timestamp,lat,lon,occupancy\na,100,31.201,121.401,\n";
        assert!(matches!(
            parse_str(text, DatasetFormat::TaxiOccupancy),
            Err(Error::MissingOccupancy { row: 2 })
        ));
        let text = "vehicle_id,timestamp,lat,lon\na,100,31.201,121.401\n";
        assert!(matches!(
            parse_str(text, DatasetFormat::TaxiOccupancy),
            Err(Error::MissingOccupancy { row: 2 })
        ));
        let text = "vehicle_id,timestamp,lat,lon,occupancy\na,100,31.201,121.401,1\n";
        let out = parse_str(text, DatasetFormat::TaxiOccupancy).unwrap();
        assert_eq!(out.traces[0].records[0].occupied, Some(true));
    }

    #[test]
    fn vehicles_in_id_order() {
        let text = "vehicle_id,timestamp,lat,lon\nb,1,31.201,121.401\na,1,31.201,121.401\n";
        let out = parse_str(text, DatasetFormat::PrivateCar).unwrap();
        let ids: Vec<&str> = out.traces.iter().map(|t| t.vehicle_id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b"]);
    }

    fn arb_traces() -> impl Strategy<Value = Vec<Trace>> {
        let rec = (0u32..108, 0i64..5 * 86_400, prop::option::of(any::<bool>()));
        prop::collection::btree_map("[a-z]{1,4}", prop::collection::vec(rec, 1..20), 0..5).prop_map(
            |m| {
                let mut per = BTreeMap::new();
                for (id, recs) in m {
                    let v: Vec<Record> = recs
                        .into_iter()
                        .map(|(region, time, occupied)| Record {
                            region,
                            time,
                            occupied,
                        })
                        .collect();
                    per.insert(id, v);
                }
                assemble(per).0
            },
        )
    }

    proptest! {
        #[test]
        fn serialized_traces_reparse_equal(traces in arb_traces()) {
            let mut buf = Vec::new();
            write_traces(&mut buf, &traces).unwrap();
            let back = read_traces(buf.as_slice(), &GridMap::default()).unwrap();
            prop_assert_eq!(back, traces);
        }
    }
}
