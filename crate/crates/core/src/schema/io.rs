//! Survey and incident CSV readers/writers.
//!
//! Survey header: `subject_id,locality_id,collected_at,<feature ids...>`.
//! Feature columns are matched to the schema by id, so column order is free.

use std::io::{Read, Write};

use super::{FeatureSchema, IncidentLabel, Outcome, SurveyRecord};
use crate::error::{Error, Result};

const META: [&str; 3] = ["subject_id", "locality_id", "collected_at"];

pub fn read_survey_csv<R: Read>(reader: R, schema: &FeatureSchema) -> Result<Vec<SurveyRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    for (i, name) in META.iter().enumerate() {
        if headers.get(i) != Some(*name) {
            return Err(Error::Parse(format!("survey header column {i} must be `{name}`")));
        }
    }
    let feature_cols = &headers.iter().skip(META.len()).collect::<Vec<_>>();
    if feature_cols.len() != schema.len() {
        return Err(Error::SchemaMismatch { expected: schema.len(), got: feature_cols.len() });
    }
    // column position -> schema index
    let mut mapping = Vec::with_capacity(feature_cols.len());
    for name in feature_cols {
        let idx = schema
            .index_of(name)
            .ok_or_else(|| Error::Parse(format!("unknown feature column `{name}`")))?;
        if mapping.contains(&idx) {
            return Err(Error::Parse(format!("feature column `{name}` repeated")));
        }
        mapping.push(idx);
    }

    let mut out = Vec::new();
    for (line, row) in rdr.records().enumerate() {
        let row = row?;
        let field = |i: usize| row.get(i).unwrap_or("");
        let collected_at = field(2)
            .parse::<u64>()
            .map_err(|_| Error::Parse(format!("row {}: bad collected_at `{}`", line + 1, field(2))))?;
        let mut values = vec![f64::NAN; schema.len()];
        for (col, &idx) in mapping.iter().enumerate() {
            let raw = field(META.len() + col);
            // unparseable cells become NaN so validation reports them as range violations
            values[idx] = raw.parse::<f64>().unwrap_or(f64::NAN);
        }
        out.push(SurveyRecord {
            subject_id: field(0).to_string(),
            locality_id: field(1).to_string(),
            values,
            collected_at,
        });
    }
    Ok(out)
}

pub fn write_survey_csv<W: Write>(writer: W, schema: &FeatureSchema, records: &[SurveyRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let header: Vec<String> = META.iter().map(|s| s.to_string()).chain(schema.feature_ids()).collect();
    wtr.write_record(&header)?;
    for r in records {
        let mut row = vec![r.subject_id.clone(), r.locality_id.clone(), r.collected_at.to_string()];
        row.extend(r.values.iter().map(|v| v.to_string()));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_incidents_csv<R: Read>(reader: R) -> Result<Vec<IncidentLabel>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["subject_id", "outcome", "observed_at"] {
        return Err(Error::Parse("incident header must be `subject_id,outcome,observed_at`".into()));
    }
    rdr.records()
        .enumerate()
        .map(|(line, row)| {
            let row = row?;
            let observed_at = row[2]
                .parse::<u64>()
                .map_err(|_| Error::Parse(format!("row {}: bad observed_at `{}`", line + 1, &row[2])))?;
            Ok(IncidentLabel { subject_id: row[0].to_string(), outcome: Outcome::parse(&row[1])?, observed_at })
        })
        .collect()
}

pub fn write_incidents_csv<W: Write>(writer: W, labels: &[IncidentLabel]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["subject_id", "outcome", "observed_at"])?;
    for l in labels {
        wtr.write_record([l.subject_id.as_str(), l.outcome.as_str(), &l.observed_at.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}
