#![allow(dead_code)]

pub mod mh_oracle;
pub mod nms_oracle;
