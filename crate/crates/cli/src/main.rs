use clap::Parser;
use mentor_cli::{init_thread_pool, run, App};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let app = App::parse();
    let code = match init_thread_pool().and_then(|()| run(app)) {
        Ok(()) => mentor_cli::EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}
