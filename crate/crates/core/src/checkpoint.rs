//! Checkpoints: one binary map holding student, teacher and optimizer state,
//! the step counter and the resolved config text.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::binmap::{read_single, write_single, BinMap, Value};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::{values_of, Student, Teacher};
use crate::optim::Adam;

pub const CHECKPOINT_VERSION: i64 = 1;

fn put_tensors(map: &mut BinMap, prefix: &str, values: &BTreeMap<String, Tensor>) -> Result<()> {
    for (name, t) in values {
        let data = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        map.insert_f32(format!("{prefix}.{name}"), t.dims(), data);
    }
    Ok(())
}

fn take_tensors(map: &BinMap, prefix: &str) -> Result<BTreeMap<String, Tensor>> {
    let lead = format!("{prefix}.");
    let mut out = BTreeMap::new();
    for key in map.keys() {
        if let Some(name) = key.strip_prefix(&lead) {
            let (shape, data) = map.f32s(key)?;
            out.insert(
                name.to_string(),
                Tensor::from_vec(data.to_vec(), shape, &Device::Cpu)?,
            );
        }
    }
    Ok(out)
}

/// Everything needed to continue training exactly where it stopped.
pub struct Checkpoint {
    pub config: Config,
    pub step: u64,
    pub student: Student,
    pub teacher: Teacher,
    pub adam: Adam,
}

pub fn save_checkpoint(
    path: &Path,
    config: &Config,
    step: u64,
    student: &Student,
    teacher: &Teacher,
    adam: &Adam,
) -> Result<()> {
    let mut map = BinMap::new();
    map.insert("version", Value::I64(CHECKPOINT_VERSION));
    map.insert("step", Value::I64(step as i64));
    map.insert("adam_t", Value::I64(adam.t as i64));
    map.insert("config", Value::Str(config.to_text()));
    put_tensors(&mut map, "student", &values_of(&student.params))?;
    put_tensors(&mut map, "teacher", &values_of(&teacher.params))?;
    put_tensors(&mut map, "adam_m", &adam.m)?;
    put_tensors(&mut map, "adam_v", &adam.v)?;
    write_single(path, &map)
}

pub fn load_checkpoint(path: &Path, dtype: DType) -> Result<Checkpoint> {
    let map = read_single(path)?;
    let version = map.i64("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "{}: checkpoint version {version}, expected {CHECKPOINT_VERSION}",
            path.display()
        )));
    }
    let config = Config::parse(map.str("config")?)?;
    let student = Student::from_values(&config.model, &take_tensors(&map, "student")?, dtype)?;
    let teacher = Teacher::from_values(&config.model, &take_tensors(&map, "teacher")?, dtype)?;
    let cast = |m: BTreeMap<String, Tensor>| -> Result<BTreeMap<String, Tensor>> {
        m.into_iter()
            .map(|(k, v)| Ok((k, v.to_dtype(dtype)?)))
            .collect()
    };
    let adam = Adam {
        t: map.i64("adam_t")? as u64,
        m: cast(take_tensors(&map, "adam_m")?)?,
        v: cast(take_tensors(&map, "adam_v")?)?,
        ..Adam::default()
    };
    Ok(Checkpoint {
        config,
        step: map.i64("step")? as u64,
        student,
        teacher,
        adam,
    })
}
