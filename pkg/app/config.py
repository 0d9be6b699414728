from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    logging_level: str = "INFO"
    environment: str = "development"
    sentry_dsn: str = ""
    root_path: str = ""
    front_url: str = "http://localhost:3006"
    data_dir: str = "data"
    default_jobs: int = 1
    model_config = SettingsConfigDict(env_file=".env", extra="ignore")


settings = Settings()
