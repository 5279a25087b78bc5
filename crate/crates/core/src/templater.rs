//! Renders metadata rows as sentences and writes JSONL training examples.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Metric, QosRecord, ServiceMeta, UserMeta, UNKNOWN};
use crate::error::{Error, Result};

/// Text placed between the user and service descriptions in `feature`.
pub const JOINER: &str = " ||| ";

pub const USER_TEMPLATE: &str =
    "User {id} from {country}, IP {ip} (number {ipnum}), autonomous system {as}, located at ({lat}, {lon}).";
pub const SERVICE_TEMPLATE: &str = "Service {id} provided by {provider} from {country}, WSDL {wsdl}, IP {ip} (number {ipnum}), autonomous system {as}, located at ({lat}, {lon}).";

/// One JSONL line: the rendered description plus its regression target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureExample {
    pub feature: String,
    pub target: f64,
    pub user_id: u32,
    pub service_id: u32,
    pub metric: Metric,
}

impl FeatureExample {
    /// Splits `feature` back into its user and service halves.
    pub fn parts(&self) -> (&str, &str) {
        self.feature.split_once(JOINER).unwrap_or((self.feature.as_str(), ""))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Templates {
    pub user: String,
    pub service: String,
}

impl Default for Templates {
    fn default() -> Self {
        Templates {
            user: USER_TEMPLATE.to_string(),
            service: SERVICE_TEMPLATE.to_string(),
        }
    }
}

fn ip_number(n: Option<u64>) -> String {
    n.map_or_else(|| UNKNOWN.to_string(), |n| n.to_string())
}

fn fill(template: &str, slots: &[(&str, String)]) -> String {
    let mut out = String::with_capacity(template.len() + 64);
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let after = &rest[start + 1..];
        match after.find('}') {
            Some(end) => {
                let key = &after[..end];
                match slots.iter().find(|(k, _)| *k == key) {
                    Some((_, v)) => out.push_str(v),
                    None => {
                        out.push('{');
                        out.push_str(key);
                        out.push('}');
                    }
                }
                rest = &after[end + 1..];
            }
            None => {
                out.push_str(&rest[start..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

impl Templates {
    pub fn render_user(&self, u: &UserMeta) -> String {
        fill(
            &self.user,
            &[
                ("id", u.user_id.to_string()),
                ("country", u.country.clone()),
                ("ip", u.ip_address.clone()),
                ("ipnum", ip_number(u.ip_number)),
                ("as", u.autonomous_system.clone()),
                ("lat", format!("{:.1}", u.latitude)),
                ("lon", format!("{:.1}", u.longitude)),
            ],
        )
    }

    pub fn render_service(&self, s: &ServiceMeta) -> String {
        fill(
            &self.service,
            &[
                ("id", s.service_id.to_string()),
                ("provider", s.provider.clone()),
                ("country", s.country.clone()),
                ("wsdl", s.wsdl_address.clone()),
                ("ip", s.ip_address.clone()),
                ("ipnum", ip_number(s.ip_number)),
                ("as", s.autonomous_system.clone()),
                ("lat", format!("{:.1}", s.latitude)),
                ("lon", format!("{:.1}", s.longitude)),
            ],
        )
    }

    pub fn build_examples(
        &self,
        records: &[QosRecord],
        users: &[UserMeta],
        services: &[ServiceMeta],
    ) -> Result<Vec<FeatureExample>> {
        let users: HashMap<u32, String> = users.iter().map(|u| (u.user_id, self.render_user(u))).collect();
        let services: HashMap<u32, String> = services
            .iter()
            .map(|s| (s.service_id, self.render_service(s)))
            .collect();
        records
            .iter()
            .map(|r| {
                let u = users.get(&r.user_id).ok_or_else(|| {
                    Error::Referential(format!(
                        "record (user {}, service {}) references unknown user {}",
                        r.user_id, r.service_id, r.user_id
                    ))
                })?;
                let s = services.get(&r.service_id).ok_or_else(|| {
                    Error::Referential(format!(
                        "record (user {}, service {}) references unknown service {}",
                        r.user_id, r.service_id, r.service_id
                    ))
                })?;
                Ok(FeatureExample {
                    feature: format!("{u}{JOINER}{s}"),
                    target: r.target,
                    user_id: r.user_id,
                    service_id: r.service_id,
                    metric: r.metric,
                })
            })
            .collect()
    }
}

pub fn render_user(u: &UserMeta) -> String {
    Templates::default().render_user(u)
}

pub fn render_service(s: &ServiceMeta) -> String {
    Templates::default().render_service(s)
}

/// Builds one example per record, in input order, with the default templates.
pub fn build_examples(
    records: &[QosRecord],
    users: &[UserMeta],
    services: &[ServiceMeta],
) -> Result<Vec<FeatureExample>> {
    Templates::default().build_examples(records, users, services)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| Error::json(path.display().to_string(), e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::json(format!("{}:{}", path.display(), i + 1), e))?);
    }
    Ok(out)
}
