#![allow(dead_code)]

pub mod bleu_ref;
pub mod oracle;
