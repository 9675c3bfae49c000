use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::grid::{GridDataset, GridPoint};
use super::hamiltonian::{Boundary, HamiltonianSpec, SpinModel};
use super::SpinConfiguration;
use crate::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct AxisHeader {
    name: String,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    model: SpinModel,
    n_sites: usize,
    boundary: Boundary,
    axes: [AxisHeader; 2],
    samples_per_point: usize,
    seed: u64,
    format_version: u32,
}

#[derive(Serialize, Deserialize)]
struct DatasetRecord {
    axis1: f64,
    axis2: f64,
    samples: Vec<String>,
}

/// Newline-delimited dataset file: one JSON header line, then one JSON record
/// per grid point with samples as '0'/'1' strings ('1' = +1, site 0 leftmost).
pub fn write_grid_dataset(dataset: &GridDataset, path: &Path) -> Result<()> {
    let (name1, name2) = dataset.axis_names();
    let header = DatasetHeader {
        model: dataset.template.model,
        n_sites: dataset.template.n_sites,
        boundary: dataset.template.boundary,
        axes: [
            AxisHeader {
                name: name1.to_string(),
                values: dataset.axis1_values.clone(),
            },
            AxisHeader {
                name: name2.to_string(),
                values: dataset.axis2_values.clone(),
            },
        ],
        samples_per_point: dataset.samples_per_point,
        seed: dataset.seed,
        format_version: DATASET_FORMAT_VERSION,
    };
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for point in &dataset.records {
        let record = DatasetRecord {
            axis1: point.axis1,
            axis2: point.axis2,
            samples: point.samples.iter().map(|s| s.to_bitstring()).collect(),
        };
        serde_json::to_writer(&mut w, &record)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_grid_dataset(path: &Path) -> Result<GridDataset> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::invalid("empty dataset file"))??;
    let header: DatasetHeader = serde_json::from_str(&header_line)
        .map_err(|e| Error::MalformedRecord {
            line: 1,
            message: e.to_string(),
        })?;
    if header.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::invalid(format!(
            "unsupported dataset format version {}",
            header.format_version
        )));
    }

    let template = match header.model {
        SpinModel::NnnTfim => HamiltonianSpec::nnn(header.n_sites, 0.0, 0.0),
        SpinModel::LrTfim => HamiltonianSpec::lr(header.n_sites, 1.0, 0.0),
    };

    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 2;
        let record: DatasetRecord =
            serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                line: line_no,
                message: e.to_string(),
            })?;
        let mut samples = Vec::with_capacity(record.samples.len());
        for bits in &record.samples {
            if bits.len() != header.n_sites {
                return Err(Error::MalformedRecord {
                    line: line_no,
                    message: format!(
                        "sample length {} does not match n_sites {}",
                        bits.len(),
                        header.n_sites
                    ),
                });
            }
            samples.push(SpinConfiguration::from_bitstring(bits).map_err(|e| {
                Error::MalformedRecord {
                    line: line_no,
                    message: e.to_string(),
                }
            })?);
        }
        records.push(GridPoint {
            axis1: record.axis1,
            axis2: record.axis2,
            samples,
        });
    }

    Ok(GridDataset {
        template,
        axis1_values: header.axes[0].values.clone(),
        axis2_values: header.axes[1].values.clone(),
        samples_per_point: header.samples_per_point,
        seed: header.seed,
        records,
    })
}
