pub mod corpus;
pub mod evaluation;
pub mod prompts;
pub mod providers;
pub mod retrieval;
pub mod runner;
pub mod text;
