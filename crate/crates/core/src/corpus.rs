//! WS-DREAM style metadata tables, QoS matrices and density splits.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Placeholder for any missing or unparseable text field.
pub const UNKNOWN: &str = "unknown";

/// Conventional WS-DREAM marker for an unobserved matrix cell.
pub const DEFAULT_MISSING_MARKER: f64 = -1.0;

pub const DEFAULT_VALIDATION_FRACTION: f64 = 0.20;
pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_DENSITIES: [f64; 4] = [0.05, 0.10, 0.15, 0.20];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// Response time in seconds.
    Rt,
    /// Throughput in kbps.
    Tp,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Rt => "rt",
            Metric::Tp => "tp",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rt" => Ok(Metric::Rt),
            "tp" => Ok(Metric::Tp),
            other => Err(Error::Config(format!("unknown metric `{other}` (expected rt or tp)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserMeta {
    pub user_id: u32,
    pub ip_address: String,
    pub country: String,
    pub ip_number: Option<u64>,
    pub autonomous_system: String,
    pub latitude: f64,
    pub longitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceMeta {
    pub service_id: u32,
    pub wsdl_address: String,
    pub provider: String,
    pub ip_address: String,
    pub country: String,
    pub ip_number: Option<u64>,
    pub autonomous_system: String,
    pub latitude: f64,
    pub longitude: f64,
}

/// One observed invocation: who called what, and the measured value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QosRecord {
    pub user_id: u32,
    pub service_id: u32,
    pub metric: Metric,
    pub target: f64,
}

impl QosRecord {
    pub fn key(&self) -> (u32, u32, Metric) {
        (self.user_id, self.service_id, self.metric)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<QosRecord>,
    pub validation: Vec<QosRecord>,
    pub test: Vec<QosRecord>,
    pub density: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn total(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }
}

/// Counters for lines or cells that loaded with fallbacks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadWarnings {
    pub bad_coordinates: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatrixLoad {
    pub records: Vec<QosRecord>,
    pub rows: usize,
    pub columns: usize,
    /// Cells equal to the missing marker.
    pub dropped_missing: usize,
    /// Cells that were negative or non-finite but not the marker.
    pub dropped_invalid: usize,
}

impl MatrixLoad {
    pub fn dropped(&self) -> usize {
        self.dropped_missing + self.dropped_invalid
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn normalize_header(h: &str) -> String {
    h.chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .collect::<String>()
        .to_ascii_lowercase()
}

fn detect_delimiter(header: &str) -> char {
    if header.contains('\t') {
        '\t'
    } else {
        ','
    }
}

struct Table {
    context: String,
    columns: Vec<String>,
    rows: Vec<(usize, Vec<String>)>,
}

impl Table {
    fn parse(path: &Path) -> Result<Self> {
        let context = path.display().to_string();
        let text = read_to_string(path)?;
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| Error::Schema {
            context: context.clone(),
            message: "empty table (missing header)".into(),
        })?;
        let delim = detect_delimiter(header);
        let columns = header.split(delim).map(normalize_header).collect();
        let rows = lines
            .map(|(i, l)| (i + 1, l.split(delim).map(|c| c.trim().to_string()).collect()))
            .collect();
        Ok(Table { context, columns, rows })
    }

    fn column(&self, aliases: &[&str]) -> Option<usize> {
        self.columns.iter().position(|c| aliases.iter().any(|a| c == a))
    }

    fn require(&self, aliases: &[&str]) -> Result<usize> {
        self.column(aliases).ok_or_else(|| Error::Schema {
            context: self.context.clone(),
            message: format!("missing column `{}`", aliases[0]),
        })
    }
}

const ID_USER: &[&str] = &["userid", "user"];
const ID_SERVICE: &[&str] = &["serviceid", "service", "wsid"];
const COL_IP: &[&str] = &["ipaddress", "ip"];
const COL_COUNTRY: &[&str] = &["country"];
const COL_IPNUM: &[&str] = &["ipnumber", "ipno", "ipnum"];
const COL_AS: &[&str] = &["autonomoussystem", "as", "asn"];
const COL_LAT: &[&str] = &["latitude", "lat"];
const COL_LON: &[&str] = &["longitude", "lon", "lng"];
const COL_WSDL: &[&str] = &["wsdladdress", "wsdl", "url"];
const COL_PROVIDER: &[&str] = &["provider", "serviceprovider"];

fn text_field(row: &[String], col: Option<usize>) -> String {
    match col.and_then(|c| row.get(c)).map(|s| s.trim()) {
        Some(s) if !s.is_empty() && !s.eq_ignore_ascii_case("null") && s != "-" => s.to_string(),
        _ => UNKNOWN.to_string(),
    }
}

fn ip_number_field(row: &[String], col: Option<usize>) -> Option<u64> {
    col.and_then(|c| row.get(c)).and_then(|s| s.trim().parse::<u64>().ok())
}

fn coordinates(row: &[String], lat: Option<usize>, lon: Option<usize>, warnings: &mut LoadWarnings) -> (f64, f64) {
    let parse = |c: Option<usize>| c.and_then(|c| row.get(c)).and_then(|s| s.trim().parse::<f64>().ok());
    match (parse(lat), parse(lon)) {
        (Some(la), Some(lo)) if la.is_finite() && lo.is_finite() && la.abs() <= 90.0 && lo.abs() <= 180.0 => (la, lo),
        _ => {
            warnings.bad_coordinates += 1;
            (0.0, 0.0)
        }
    }
}

fn parse_id(table: &Table, line: usize, row: &[String], col: usize) -> Result<u32> {
    let raw = row.get(col).map(String::as_str).unwrap_or("");
    raw.trim().parse::<u32>().map_err(|_| Error::Schema {
        context: table.context.clone(),
        message: format!("line {line}: id `{raw}` is not a non-negative integer"),
    })
}

pub fn load_users(path: &Path, warnings: &mut LoadWarnings) -> Result<Vec<UserMeta>> {
    let table = Table::parse(path)?;
    let id = table.require(ID_USER)?;
    let (ip, country, ipnum, asys, lat, lon) = (
        table.column(COL_IP),
        table.column(COL_COUNTRY),
        table.column(COL_IPNUM),
        table.column(COL_AS),
        table.column(COL_LAT),
        table.column(COL_LON),
    );
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(table.rows.len());
    for (line, row) in &table.rows {
        let user_id = parse_id(&table, *line, row, id)?;
        if !seen.insert(user_id) {
            return Err(Error::Schema {
                context: table.context.clone(),
                message: format!("duplicate user id {user_id} at line {line}"),
            });
        }
        let (latitude, longitude) = coordinates(row, lat, lon, warnings);
        out.push(UserMeta {
            user_id,
            ip_address: text_field(row, ip),
            country: text_field(row, country),
            ip_number: ip_number_field(row, ipnum),
            autonomous_system: text_field(row, asys),
            latitude,
            longitude,
        });
    }
    Ok(out)
}

pub fn load_services(path: &Path, warnings: &mut LoadWarnings) -> Result<Vec<ServiceMeta>> {
    let table = Table::parse(path)?;
    let id = table.require(ID_SERVICE)?;
    let (wsdl, provider, ip, country, ipnum, asys, lat, lon) = (
        table.column(COL_WSDL),
        table.column(COL_PROVIDER),
        table.column(COL_IP),
        table.column(COL_COUNTRY),
        table.column(COL_IPNUM),
        table.column(COL_AS),
        table.column(COL_LAT),
        table.column(COL_LON),
    );
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(table.rows.len());
    for (line, row) in &table.rows {
        let service_id = parse_id(&table, *line, row, id)?;
        if !seen.insert(service_id) {
            return Err(Error::Schema {
                context: table.context.clone(),
                message: format!("duplicate service id {service_id} at line {line}"),
            });
        }
        let (latitude, longitude) = coordinates(row, lat, lon, warnings);
        out.push(ServiceMeta {
            service_id,
            wsdl_address: text_field(row, wsdl),
            provider: text_field(row, provider),
            ip_address: text_field(row, ip),
            country: text_field(row, country),
            ip_number: ip_number_field(row, ipnum),
            autonomous_system: text_field(row, asys),
            latitude,
            longitude,
        });
    }
    Ok(out)
}

/// Loads both metadata tables. Coordinate fallbacks are counted in `warnings`.
pub fn load_metadata(
    user_table: &Path,
    service_table: &Path,
    warnings: &mut LoadWarnings,
) -> Result<(Vec<UserMeta>, Vec<ServiceMeta>)> {
    let users = load_users(user_table, warnings)?;
    let services = load_services(service_table, warnings)?;
    if warnings.bad_coordinates > 0 {
        log::warn!(
            "{} metadata rows had unparseable coordinates; substituted (0, 0)",
            warnings.bad_coordinates
        );
    }
    Ok((users, services))
}

/// Parses a dense users x services matrix. Row index is the user id and
/// column index the service id, both zero-based.
pub fn parse_qos_matrix(text: &str, context: &str, metric: Metric, missing_marker: f64) -> Result<MatrixLoad> {
    let mut load = MatrixLoad::default();
    let mut width: Option<usize> = None;
    for (row, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let mut cols = 0;
        for (col, cell) in line.split(['\t', ',', ' ']).filter(|c| !c.is_empty()).enumerate() {
            cols += 1;
            let value: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                context: context.to_string(),
                row,
                column: col,
                message: format!("non-numeric cell `{cell}`"),
            })?;
            if value == missing_marker {
                load.dropped_missing += 1;
            } else if !value.is_finite() || value < 0.0 {
                load.dropped_invalid += 1;
            } else {
                load.records.push(QosRecord {
                    user_id: row as u32,
                    service_id: col as u32,
                    metric,
                    target: value,
                });
            }
        }
        match width {
            None => width = Some(cols),
            Some(w) if w != cols => {
                return Err(Error::Parse {
                    context: context.to_string(),
                    row,
                    column: cols.min(w),
                    message: format!("ragged row: {cols} cells, expected {w}"),
                })
            }
            _ => {}
        }
        load.rows += 1;
    }
    load.columns = width.unwrap_or(0);
    if load.records.is_empty() {
        log::warn!("{context}: no observed entries (all cells missing)");
    } else if load.dropped() > 0 {
        log::info!(
            "{context}: kept {} cells, dropped {} missing and {} invalid",
            load.records.len(),
            load.dropped_missing,
            load.dropped_invalid
        );
    }
    Ok(load)
}

pub fn load_qos_matrix(path: &Path, metric: Metric, missing_marker: f64) -> Result<MatrixLoad> {
    let text = read_to_string(path)?;
    parse_qos_matrix(&text, &path.display().to_string(), metric, missing_marker)
}

fn round_count(fraction: f64, n: usize) -> usize {
    (fraction * n as f64).round() as usize
}

/// Shuffles the cells under `seed` and partitions them. Validation takes
/// `round(validation_fraction * N)` first, train takes `round(density * N)`
/// of the remainder and the test split receives everything else.
pub fn split_by_density(
    records: &[QosRecord],
    density: f64,
    validation_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    if !(density > 0.0 && density < 1.0) {
        return Err(Error::Config(format!("density {density} must lie in (0, 1)")));
    }
    if !(0.0..1.0).contains(&validation_fraction) {
        return Err(Error::Config(format!(
            "validation fraction {validation_fraction} must lie in [0, 1)"
        )));
    }
    if density + validation_fraction >= 1.0 {
        return Err(Error::Config(format!(
            "density {density} + validation fraction {validation_fraction} leaves no test data"
        )));
    }
    let n = records.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let n_valid = round_count(validation_fraction, n).min(n);
    let n_train = round_count(density, n).min(n - n_valid);
    let pick = |idx: &[usize]| idx.iter().map(|&i| records[i]).collect::<Vec<_>>();
    Ok(DatasetSplit {
        validation: pick(&order[..n_valid]),
        train: pick(&order[n_valid..n_valid + n_train]),
        test: pick(&order[n_valid + n_train..]),
        density,
        validation_fraction,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    const USER_HEADER: &str = "user_id, ip_address, country, ip_number, autonomous_system, latitude, longitude\n";
    const SERVICE_HEADER: &str = "[Service ID]\t[WSDL Address]\t[Service Provider]\t[IP Address]\t[Country]\t[IP No.]\t[AS]\t[Latitude]\t[Longitude]\n";

    #[test]
    fn user_row_maps_fields() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "u.csv",
            &format!("{USER_HEADER}12, 1.2.3.4, USA, 16909060, AS7018 AT&T, 38.0, -97.0\n"),
        );
        let mut w = LoadWarnings::default();
        let users = load_users(&p, &mut w).unwrap();
        assert_eq!(
            users,
            vec![UserMeta {
                user_id: 12,
                ip_address: "1.2.3.4".into(),
                country: "USA".into(),
                ip_number: Some(16909060),
                autonomous_system: "AS7018 AT&T".into(),
                latitude: 38.0,
                longitude: -97.0,
            }]
        );
        assert_eq!(w.bad_coordinates, 0);
    }

    #[test]
    fn empty_fields_become_unknown() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "u.csv", &format!("{USER_HEADER}3, , , x, null, abc, 1\n"));
        let mut w = LoadWarnings::default();
        let u = &load_users(&p, &mut w).unwrap()[0];
        assert_eq!(u.country, UNKNOWN);
        assert_eq!(u.ip_address, UNKNOWN);
        assert_eq!(u.autonomous_system, UNKNOWN);
        assert_eq!(u.ip_number, None);
        assert_eq!((u.latitude, u.longitude), (0.0, 0.0));
        assert_eq!(w.bad_coordinates, 1);
    }

    #[test]
    fn out_of_range_coordinates_fall_back() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "u.csv", &format!("{USER_HEADER}3, a, b, 1, c, 91.0, 10\n"));
        let mut w = LoadWarnings::default();
        let u = &load_users(&p, &mut w).unwrap()[0];
        assert_eq!((u.latitude, u.longitude), (0.0, 0.0));
        assert_eq!(w.bad_coordinates, 1);
    }

    #[test]
    fn duplicate_user_id_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "u.csv",
            &format!("{USER_HEADER}5, a, b, 1, c, 1, 1\n5, d, e, 2, f, 2, 2\n"),
        );
        let err = load_users(&p, &mut LoadWarnings::default()).unwrap_err();
        assert!(matches!(err, Error::Schema { .. }), "{err}");
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_users(Path::new("/nonexistent/users.txt"), &mut LoadWarnings::default()).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert!(err.to_string().contains("/nonexistent/users.txt"));
    }

    #[test]
    fn tab_separated_service_table() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "ws.txt",
            &format!("{SERVICE_HEADER}0\thttp://x/ws?wsdl\tIBM\t9.9.9.9\tUSA\t151587081\tAS1 IBM\t40.5\t-73.9\n"),
        );
        let s = &load_services(&p, &mut LoadWarnings::default()).unwrap()[0];
        assert_eq!(s.service_id, 0);
        assert_eq!(s.provider, "IBM");
        assert_eq!(s.wsdl_address, "http://x/ws?wsdl");
        assert_eq!(s.latitude, 40.5);
    }

    #[test]
    fn matrix_filters_missing_marker() {
        let load = parse_qos_matrix("0.5\t-1\n0.2\t0.3\n", "m", Metric::Rt, -1.0).unwrap();
        assert_eq!(load.records.len(), 3);
        assert_eq!(load.dropped_missing, 1);
        assert_eq!(load.records[1].user_id, 1);
        assert_eq!(load.records[1].service_id, 0);
        assert_eq!(load.records.len() + load.dropped(), load.rows * load.columns);
    }

    #[test]
    fn all_missing_matrix_is_empty() {
        let load = parse_qos_matrix("-1 -1\n-1 -1\n", "m", Metric::Tp, -1.0).unwrap();
        assert!(load.records.is_empty());
        assert_eq!(load.dropped_missing, 4);
    }

    #[test]
    fn non_numeric_cell_reports_location() {
        let err = parse_qos_matrix("0.1\t0.2\n0.3\tabc\n", "m", Metric::Rt, -1.0).unwrap_err();
        match err {
            Error::Parse { row, column, .. } => assert_eq!((row, column), (1, 1)),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn custom_missing_marker() {
        let load = parse_qos_matrix("0 5\n", "m", Metric::Rt, 0.0).unwrap();
        assert_eq!(load.records.len(), 1);
        assert_eq!(load.dropped_missing, 1);
    }

    fn synthetic(n: usize) -> Vec<QosRecord> {
        (0..n)
            .map(|i| QosRecord {
                user_id: (i / 97) as u32,
                service_id: (i % 97) as u32,
                metric: Metric::Rt,
                target: i as f64 * 0.01,
            })
            .collect()
    }

    #[test]
    fn exact_ratio_split_sizes() {
        let s = split_by_density(&synthetic(100), 0.20, 0.20, 42).unwrap();
        assert_eq!((s.train.len(), s.test.len(), s.validation.len()), (20, 60, 20));
    }

    #[test]
    fn split_is_deterministic() {
        let r = synthetic(1000);
        let a = serde_json::to_vec(&split_by_density(&r, 0.05, 0.2, 42).unwrap()).unwrap();
        let b = serde_json::to_vec(&split_by_density(&r, 0.05, 0.2, 42).unwrap()).unwrap();
        assert_eq!(a, b);
        let c = serde_json::to_vec(&split_by_density(&r, 0.05, 0.2, 43).unwrap()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_overfull_fractions() {
        assert!(matches!(
            split_by_density(&synthetic(10), 0.8, 0.2, 1),
            Err(Error::Config(_))
        ));
        assert!(split_by_density(&synthetic(10), 0.0, 0.2, 1).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn split_partitions_input(n in 1usize..10_000, density in 0.01f64..0.79, seed in any::<u64>()) {
                let recs = synthetic(n);
                let s = split_by_density(&recs, density, 0.2, seed).unwrap();
                let mut keys: Vec<_> = s.train.iter().chain(&s.validation).chain(&s.test).map(|r| r.key()).collect();
                prop_assert_eq!(keys.len(), n);
                keys.sort();
                keys.dedup();
                prop_assert_eq!(keys.len(), n);
                prop_assert!((s.train.len() as f64 - density * n as f64).abs() <= 1.0);
                prop_assert!((s.validation.len() as f64 - 0.2 * n as f64).abs() <= 1.0);
            }

            #[test]
            fn loaded_plus_dropped_is_grid(rows in 1usize..12, cols in 1usize..12, seed in any::<u64>()) {
                use rand::Rng;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let text: String = (0..rows)
                    .map(|_| (0..cols).map(|_| if rng.gen_bool(0.3) { "-1".to_string() } else { format!("{:.3}", rng.gen::<f64>()) }).collect::<Vec<_>>().join("\t") + "\n")
                    .collect();
                let load = parse_qos_matrix(&text, "m", Metric::Rt, -1.0).unwrap();
                prop_assert_eq!(load.records.len() + load.dropped(), rows * cols);
            }
        }
    }
}
