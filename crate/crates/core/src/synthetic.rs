//! Small generated corpora with a known target function, for smoke runs,
//! tests and benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::{Metric, QosRecord, ServiceMeta, UserMeta};

const COUNTRIES: [&str; 3] = ["Germany", "Japan", "Brazil"];
const LATITUDES: [f64; 4] = [10.0, 12.0, 14.0, 16.0];

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub users: Vec<UserMeta>,
    pub services: Vec<ServiceMeta>,
    pub records: Vec<QosRecord>,
}

impl SyntheticCorpus {
    /// Dense `users x services` matrix (row = user id) with the missing marker
    /// written wherever no record exists.
    pub fn matrix_text(&self, missing_marker: f64) -> String {
        let mut grid = vec![vec![missing_marker; self.services.len()]; self.users.len()];
        for r in &self.records {
            grid[r.user_id as usize][r.service_id as usize] = r.target;
        }
        grid.iter()
            .map(|row| row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("\t"))
            .collect::<Vec<_>>()
            .join("\n")
            + "\n"
    }

    /// Tab-separated user table in the public dataset's column layout.
    pub fn user_table_text(&self) -> String {
        let mut out = String::from("[User ID]\t[IP Address]\t[Country]\t[IP No.]\t[AS]\t[Latitude]\t[Longitude]\n");
        for u in &self.users {
            out += &format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                u.user_id,
                u.ip_address,
                u.country,
                u.ip_number.map(|n| n.to_string()).unwrap_or_default(),
                u.autonomous_system,
                u.latitude,
                u.longitude
            );
        }
        out
    }

    /// Tab-separated service table in the public dataset's column layout.
    pub fn service_table_text(&self) -> String {
        let mut out = String::from(
            "[Service ID]\t[WSDL Address]\t[Service Provider]\t[IP Address]\t[Country]\t[IP No.]\t[AS]\t[Latitude]\t[Longitude]\n",
        );
        for s in &self.services {
            out += &format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                s.service_id,
                s.wsdl_address,
                s.provider,
                s.ip_address,
                s.country,
                s.ip_number.map(|n| n.to_string()).unwrap_or_default(),
                s.autonomous_system,
                s.latitude,
                s.longitude
            );
        }
        out
    }
}

/// Keeps noisy targets positive so generated matrices load without drops.
pub const TARGET_OFFSET: f64 = 0.1;

/// Noise-free target:
/// `offset + 0.1 * |lat_u - lat_s| + 0.05 * [country_u != country_s]`.
pub fn target_function(u: &UserMeta, s: &ServiceMeta) -> f64 {
    TARGET_OFFSET + 0.1 * (u.latitude - s.latitude).abs() + if u.country != s.country { 0.05 } else { 0.0 }
}

/// Every (user, service) pair with `target_function` plus `N(0, noise_std^2)`.
pub fn learnability_corpus(n_users: usize, n_services: usize, noise_std: f64, seed: u64) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let users: Vec<UserMeta> = (0..n_users)
        .map(|i| UserMeta {
            user_id: i as u32,
            ip_address: format!("10.0.{}.{}", i / 200, i % 200 + 1),
            country: COUNTRIES[rng.gen_range(0..COUNTRIES.len())].to_string(),
            ip_number: Some(167_772_160 + i as u64),
            autonomous_system: format!("AS{} Example Net", 100 + i % 7),
            latitude: LATITUDES[rng.gen_range(0..LATITUDES.len())],
            longitude: rng.gen_range(-30..30) as f64,
        })
        .collect();
    let services: Vec<ServiceMeta> = (0..n_services)
        .map(|j| ServiceMeta {
            service_id: j as u32,
            wsdl_address: format!("http://svc{j}.example.org/api?wsdl"),
            provider: format!("provider{}", j % 5),
            ip_address: format!("192.168.{}.{}", j / 200, j % 200 + 1),
            country: COUNTRIES[rng.gen_range(0..COUNTRIES.len())].to_string(),
            ip_number: Some(3_232_235_520 + j as u64),
            autonomous_system: format!("AS{} Hosting", 200 + j % 5),
            latitude: LATITUDES[rng.gen_range(0..LATITUDES.len())],
            longitude: rng.gen_range(-30..30) as f64,
        })
        .collect();
    let noise = Normal::new(0.0, noise_std).expect("noise std must be finite and non-negative");
    let mut records = Vec::with_capacity(n_users * n_services);
    for u in &users {
        for s in &services {
            records.push(QosRecord {
                user_id: u.user_id,
                service_id: s.service_id,
                metric: Metric::Rt,
                target: target_function(u, s) + noise.sample(&mut rng),
            });
        }
    }
    SyntheticCorpus {
        users,
        services,
        records,
    }
}
