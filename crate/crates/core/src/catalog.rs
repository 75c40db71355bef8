//! Machine shapes and prices for the supported GCP series (e2, n2, n1).
//!
//! Prices are always catalog data. [`MachineCatalog::sample`] ships an
//! indicative us-central1 on-demand table for tests and examples; it is not
//! a billing source.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Series {
    E2,
    N2,
    N1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Standard,
    Highmem,
    Highcpu,
}

impl Family {
    /// Memory per vCPU in GB.
    pub fn gb_per_vcpu(self) -> u32 {
        match self {
            Family::Standard => 4,
            Family::Highmem => 8,
            Family::Highcpu => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiskClass {
    Standard,
    Balanced,
    Ssd,
}

impl DiskClass {
    pub const ALL: [DiskClass; 3] = [DiskClass::Standard, DiskClass::Balanced, DiskClass::Ssd];
}

impl fmt::Display for Series {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Series::E2 => "e2",
            Series::N2 => "n2",
            Series::N1 => "n1",
        })
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Standard => "standard",
            Family::Highmem => "highmem",
            Family::Highcpu => "highcpu",
        })
    }
}

impl fmt::Display for DiskClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DiskClass::Standard => "standard",
            DiskClass::Balanced => "balanced",
            DiskClass::Ssd => "ssd",
        })
    }
}

impl FromStr for DiskClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "standard" => Ok(DiskClass::Standard),
            "balanced" => Ok(DiskClass::Balanced),
            "ssd" => Ok(DiskClass::Ssd),
            other => Err(format!("unknown disk class '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MachineNameError {
    #[error("unsupported series '{0}' (supported: e2, n2, n1)")]
    UnsupportedSeries(String),
    #[error("unknown machine family '{0}'")]
    UnknownFamily(String),
    #[error("malformed machine name '{0}' (expected <series>-<family>-<vcpus>)")]
    MalformedName(String),
}

/// Shape derived from a machine-type name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MachineShape {
    pub series: Series,
    pub family: Family,
    pub vcpu: u32,
    pub mem_gb: u32,
}

/// Split `<series>-<family>-<vcpus>` and derive memory from the family ratio.
pub fn parse_machine_name(name: &str) -> Result<MachineShape, MachineNameError> {
    let malformed = || MachineNameError::MalformedName(name.to_string());
    let mut parts = name.split('-');
    let (Some(series), Some(family), Some(count), None) =
        (parts.next(), parts.next(), parts.next(), parts.next())
    else {
        return Err(malformed());
    };
    let series = match series {
        "e2" => Series::E2,
        "n2" => Series::N2,
        "n1" => Series::N1,
        s if !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric()) => {
            return Err(MachineNameError::UnsupportedSeries(s.to_string()))
        }
        _ => return Err(malformed()),
    };
    let family = match family {
        "standard" => Family::Standard,
        "highmem" => Family::Highmem,
        "highcpu" => Family::Highcpu,
        f if !f.is_empty() && f.chars().all(|c| c.is_ascii_alphanumeric()) => {
            return Err(MachineNameError::UnknownFamily(f.to_string()))
        }
        _ => return Err(malformed()),
    };
    if count.is_empty() || count.starts_with('0') || !count.chars().all(|c| c.is_ascii_digit()) {
        return Err(malformed());
    }
    let vcpu: u32 = count.parse().map_err(|_| malformed())?;
    let mem_gb = vcpu.checked_mul(family.gb_per_vcpu()).ok_or_else(malformed)?;
    Ok(MachineShape {
        series,
        family,
        vcpu,
        mem_gb,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineType {
    pub name: String,
    pub series: Series,
    pub family: Family,
    pub vcpu: u32,
    pub mem_gb: f64,
    pub price_per_hour: Decimal,
}

impl MachineType {
    /// A machine with family-ratio memory.
    pub fn from_name(name: &str, price_per_hour: Decimal) -> Result<Self, MachineNameError> {
        let shape = parse_machine_name(name)?;
        Ok(Self {
            name: name.to_string(),
            series: shape.series,
            family: shape.family,
            vcpu: shape.vcpu,
            mem_gb: f64::from(shape.mem_gb),
            price_per_hour,
        })
    }

    pub fn fits(&self, need_vcpu: f64, need_mem_gb: f64) -> bool {
        f64::from(self.vcpu) >= need_vcpu && self.mem_gb >= need_mem_gb
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiskPrice {
    #[serde(rename = "class")]
    pub disk_class: DiskClass,
    pub price_per_gb_hour: Decimal,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MachineCatalog {
    pub currency: String,
    pub machines: Vec<MachineType>,
    pub disks: Vec<DiskPrice>,
}

#[derive(Debug, thiserror::Error)]
pub enum CatalogError {
    #[error("catalog parse error: {0}")]
    Parse(String),
    #[error("catalog entry '{name}': {source}")]
    BadName {
        name: String,
        source: MachineNameError,
    },
    #[error("catalog entry '{name}' declares {declared} GB memory but its family ratio gives {derived} GB (set \"override\": true to accept)")]
    InconsistentShape {
        name: String,
        declared: f64,
        derived: u32,
    },
    #[error("machine '{0}' listed more than once")]
    DuplicateMachine(String),
    #[error("disk class '{0}' listed more than once")]
    DuplicateDisk(DiskClass),
    #[error("catalog has no price for disk class '{0}'")]
    MissingDiskClass(DiskClass),
    #[error("negative price in catalog entry '{0}'")]
    NegativePrice(String),
    #[error("reading catalog {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCatalog {
    currency: String,
    #[serde(default)]
    #[allow(dead_code)]
    note: Option<String>,
    machines: Vec<RawMachine>,
    disks: Vec<DiskPrice>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMachine {
    name: String,
    price_per_hour: Decimal,
    #[serde(default)]
    mem_gb: Option<f64>,
    #[serde(default, rename = "override")]
    override_memory: bool,
}

const SAMPLE_CATALOG: &str = include_str!("../data/sample_catalog.json");

impl MachineCatalog {
    /// Build a catalog from already-constructed entries, enforcing the
    /// uniqueness and completeness invariants.
    pub fn new(
        currency: impl Into<String>,
        machines: Vec<MachineType>,
        disks: Vec<DiskPrice>,
    ) -> Result<Self, CatalogError> {
        let mut names = HashSet::new();
        for m in &machines {
            if !names.insert(m.name.as_str()) {
                return Err(CatalogError::DuplicateMachine(m.name.clone()));
            }
            if m.price_per_hour.is_sign_negative() && !m.price_per_hour.is_zero() {
                return Err(CatalogError::NegativePrice(m.name.clone()));
            }
        }
        let mut classes = HashSet::new();
        for d in &disks {
            if !classes.insert(d.disk_class) {
                return Err(CatalogError::DuplicateDisk(d.disk_class));
            }
            if d.price_per_gb_hour.is_sign_negative() && !d.price_per_gb_hour.is_zero() {
                return Err(CatalogError::NegativePrice(d.disk_class.to_string()));
            }
        }
        if let Some(missing) = DiskClass::ALL.into_iter().find(|c| !classes.contains(c)) {
            return Err(CatalogError::MissingDiskClass(missing));
        }
        Ok(Self {
            currency: currency.into(),
            machines,
            disks,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, CatalogError> {
        let raw: RawCatalog =
            serde_json::from_str(text).map_err(|e| CatalogError::Parse(e.to_string()))?;
        let mut machines = Vec::with_capacity(raw.machines.len());
        for entry in raw.machines {
            let shape = parse_machine_name(&entry.name).map_err(|source| CatalogError::BadName {
                name: entry.name.clone(),
                source,
            })?;
            let mem_gb = match entry.mem_gb {
                Some(declared) if entry.override_memory => {
                    if !(declared > 0.0 && declared.is_finite()) {
                        return Err(CatalogError::Parse(format!(
                            "entry '{}': mem_gb must be positive",
                            entry.name
                        )));
                    }
                    declared
                }
                Some(declared) if declared != f64::from(shape.mem_gb) => {
                    return Err(CatalogError::InconsistentShape {
                        name: entry.name,
                        declared,
                        derived: shape.mem_gb,
                    })
                }
                _ => f64::from(shape.mem_gb),
            };
            machines.push(MachineType {
                name: entry.name,
                series: shape.series,
                family: shape.family,
                vcpu: shape.vcpu,
                mem_gb,
                price_per_hour: entry.price_per_hour,
            });
        }
        Self::new(raw.currency, machines, raw.disks)
    }

    pub fn load(path: &Path) -> Result<Self, CatalogError> {
        let text = std::fs::read_to_string(path).map_err(|source| CatalogError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// The bundled indicative catalog.
    pub fn sample() -> Self {
        Self::from_json(SAMPLE_CATALOG).expect("bundled catalog is valid")
    }

    pub fn machine(&self, name: &str) -> Option<&MachineType> {
        self.machines.iter().find(|m| m.name == name)
    }

    pub fn disk_price(&self, class: DiskClass) -> Option<Decimal> {
        self.disks
            .iter()
            .find(|d| d.disk_class == class)
            .map(|d| d.price_per_gb_hour)
    }

    /// A copy with every machine and disk price multiplied by `factor`.
    pub fn scaled(&self, factor: Decimal) -> Self {
        let mut out = self.clone();
        for m in &mut out.machines {
            m.price_per_hour *= factor;
        }
        for d in &mut out.disks {
            d.price_per_gb_hour *= factor;
        }
        out
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Entry<'a> {
            name: &'a str,
            price_per_hour: Decimal,
            #[serde(skip_serializing_if = "Option::is_none")]
            mem_gb: Option<f64>,
            #[serde(rename = "override", skip_serializing_if = "std::ops::Not::not")]
            override_memory: bool,
        }
        #[derive(Serialize)]
        struct Out<'a> {
            currency: &'a str,
            machines: Vec<Entry<'a>>,
            disks: &'a [DiskPrice],
        }
        let machines = self
            .machines
            .iter()
            .map(|m| {
                let derived = parse_machine_name(&m.name).map(|s| f64::from(s.mem_gb)).ok();
                let overridden = derived != Some(m.mem_gb);
                Entry {
                    name: &m.name,
                    price_per_hour: m.price_per_hour,
                    mem_gb: overridden.then_some(m.mem_gb),
                    override_memory: overridden,
                }
            })
            .collect();
        serde_json::to_string_pretty(&Out {
            currency: &self.currency,
            machines,
            disks: &self.disks,
        })
        .expect("catalog serializes")
    }
}

/// Ordering used to pick among feasible machines: price, then vCPU count,
/// then name.
pub fn machine_order(a: &MachineType, b: &MachineType) -> Ordering {
    a.price_per_hour
        .cmp(&b.price_per_hour)
        .then(a.vcpu.cmp(&b.vcpu))
        .then_with(|| a.name.cmp(&b.name))
}

/// Machines with at least the requested cores and memory, cheapest first.
pub fn feasible_machines(
    catalog: &MachineCatalog,
    need_vcpu: f64,
    need_mem_gb: f64,
) -> Vec<&MachineType> {
    let mut out: Vec<&MachineType> = catalog
        .machines
        .iter()
        .filter(|m| m.fits(need_vcpu, need_mem_gb))
        .collect();
    out.sort_by(|a, b| machine_order(a, b));
    out
}
